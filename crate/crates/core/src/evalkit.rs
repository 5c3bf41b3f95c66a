//! mAP at temporal-IoU thresholds and the loss-ablation harness.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::localization::{infer_dataset, t_iou, Detection, InferConfig};
use crate::pipeline::{train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub tiou_thresholds: Vec<f64>,
    /// Frames per snippet, for converting ground-truth snippet indices.
    pub snippet_frames: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tiou_thresholds: (1..=7).map(|k| k as f64 / 10.0).collect(),
            snippet_frames: 16,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.tiou_thresholds;
        if t.is_empty() || t.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) || t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "tiou_thresholds must be non-empty, strictly increasing and in (0, 1]".into(),
            ));
        }
        if self.snippet_frames == 0 {
            return Err(Error::InvalidConfig("snippet_frames must be positive".into()));
        }
        Ok(())
    }
}

/// Ground-truth instance in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtSegment {
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    pub class_id: usize,
}

/// Ground truth of every annotated video, converted with its frame rate.
pub fn ground_truth(data: &Dataset, snippet_frames: usize) -> Vec<GtSegment> {
    let mut out = Vec::new();
    for v in &data.videos {
        let dt = snippet_frames as f64 / v.fps;
        for s in v.segments.iter().flatten() {
            out.push(GtSegment {
                video_id: v.video_id.clone(),
                t_start: s.start as f64 * dt,
                t_end: s.end as f64 * dt,
                class_id: s.class,
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ApOutcome {
    pub ap: f64,
    /// False when there were no ground-truth instances (AP reported as 0).
    pub has_gt: bool,
}

/// AP of one class's detections against its ground truth. Detections are
/// ranked by score (ties: earlier start); each one matches the unmatched
/// instance of its video with the highest t-IoU ≥ `tiou`. The result is the
/// exact area under the interpolated precision envelope.
pub fn average_precision(dets: &[Detection], gts: &[GtSegment], tiou: f64) -> ApOutcome {
    if gts.is_empty() {
        return ApOutcome { ap: 0.0, has_gt: false };
    }
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.t_start.total_cmp(&b.t_start)));
    let mut matched = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(order.len());
    for d in order {
        let best = gts
            .iter()
            .enumerate()
            .filter(|(k, g)| !matched[*k] && g.video_id == d.video_id)
            .filter_map(|(k, g)| {
                let iou = t_iou((d.t_start, d.t_end), (g.t_start, g.t_end)).ok()?;
                (iou >= tiou).then_some((k, iou))
            })
            .fold(None, |acc: Option<(usize, f64)>, (k, iou)| match acc {
                Some((_, best)) if best >= iou => acc,
                _ => Some((k, iou)),
            });
        match best {
            Some((k, _)) => {
                matched[k] = true;
                hits.push(true);
            }
            None => hits.push(false),
        }
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (rank, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    // each hit adds 1/n_gt of recall; dividing once keeps perfect runs at 1
    let area: f64 = hits.iter().zip(&precision).filter(|(h, _)| **h).map(|(_, p)| p).sum();
    ApOutcome {
        ap: area / gts.len() as f64,
        has_gt: true,
    }
}

/// mAP per threshold (percent) and the summary averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub tiou_thresholds: Vec<f64>,
    /// `per_class_ap[k][c]` in `[0, 1]` at threshold `k`.
    pub per_class_ap: Vec<Vec<f64>>,
    /// Classes without ground truth; they are excluded from the means.
    pub classes_without_gt: Vec<usize>,
    pub map: Vec<f64>,
    pub avg_01_05: Option<f64>,
    pub avg_03_07: Option<f64>,
    pub avg_all: f64,
}

fn range_mean(thresholds: &[f64], values: &[f64], lo: f64, hi: f64) -> Option<f64> {
    let eps = 1e-9;
    let sel: Vec<f64> = thresholds
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= lo - eps && **t <= hi + eps)
        .map(|(_, v)| *v)
        .collect();
    (!sel.is_empty()).then(|| sel.iter().sum::<f64>() / sel.len() as f64)
}

pub fn map_at(dets: &[Detection], gts: &[GtSegment], n_classes: usize, cfg: &EvalConfig) -> Result<MapReport> {
    cfg.validate()?;
    if let Some(d) = dets.iter().find(|d| d.class_id >= n_classes) {
        return Err(Error::Data(format!("detection class {} outside 0..{n_classes}", d.class_id)));
    }
    if let Some(g) = gts.iter().find(|g| g.class_id >= n_classes) {
        return Err(Error::Data(format!("ground-truth class {} outside 0..{n_classes}", g.class_id)));
    }
    let dets_by_class: Vec<Vec<Detection>> = (0..n_classes)
        .map(|c| dets.iter().filter(|d| d.class_id == c).cloned().collect())
        .collect();
    let gts_by_class: Vec<Vec<GtSegment>> = (0..n_classes)
        .map(|c| gts.iter().filter(|g| g.class_id == c).cloned().collect())
        .collect();
    let classes_without_gt: Vec<usize> = (0..n_classes).filter(|&c| gts_by_class[c].is_empty()).collect();
    let n_scored = n_classes - classes_without_gt.len();

    let mut per_class_ap = Vec::with_capacity(cfg.tiou_thresholds.len());
    let mut map = Vec::with_capacity(cfg.tiou_thresholds.len());
    for &thr in &cfg.tiou_thresholds {
        let aps: Vec<ApOutcome> = (0..n_classes)
            .map(|c| average_precision(&dets_by_class[c], &gts_by_class[c], thr))
            .collect();
        let sum: f64 = aps.iter().filter(|a| a.has_gt).map(|a| a.ap).sum();
        map.push(if n_scored == 0 { 0.0 } else { 100.0 * sum / n_scored as f64 });
        per_class_ap.push(aps.iter().map(|a| a.ap).collect());
    }
    let t = &cfg.tiou_thresholds;
    Ok(MapReport {
        avg_01_05: range_mean(t, &map, 0.1, 0.5),
        avg_03_07: range_mean(t, &map, 0.3, 0.7),
        avg_all: map.iter().sum::<f64>() / map.len() as f64,
        tiou_thresholds: t.clone(),
        per_class_ap,
        classes_without_gt,
        map,
    })
}

impl MapReport {
    pub fn to_csv(&self) -> String {
        let n_classes = self.per_class_ap.first().map_or(0, Vec::len);
        let mut out = String::from("tiou");
        for c in 0..n_classes {
            out.push_str(&format!(",ap_class_{c}"));
        }
        out.push_str(",map\n");
        for (k, thr) in self.tiou_thresholds.iter().enumerate() {
            out.push_str(&thr.to_string());
            for ap in &self.per_class_ap[k] {
                out.push_str(&format!(",{ap}"));
            }
            out.push_str(&format!(",{}\n", self.map[k]));
        }
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let pad = ",".repeat(n_classes);
        out.push_str(&format!("avg_0.1_0.5{pad},{}\n", fmt(self.avg_01_05)));
        out.push_str(&format!("avg_0.3_0.7{pad},{}\n", fmt(self.avg_03_07)));
        out.push_str(&format!("avg_all{pad},{}\n", self.avg_all));
        out
    }

    pub fn write(&self, json_path: impl AsRef<Path>, csv_path: Option<&Path>) -> Result<()> {
        let json_path = json_path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(json_path, text).map_err(|e| Error::io(json_path, e))?;
        if let Some(p) = csv_path {
            std::fs::write(p, self.to_csv()).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoFsd,
    NoLcs,
    BackboneOnly,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoFsd,
        AblationVariant::NoLcs,
        AblationVariant::BackboneOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoFsd => "no_fsd",
            AblationVariant::NoLcs => "no_lcs",
            AblationVariant::BackboneOnly => "backbone_only",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation variant `{name}`")))
    }

    /// The base configuration with this variant's contrastive weights.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        if matches!(self, AblationVariant::NoFsd | AblationVariant::BackboneOnly) {
            cfg.w_fsd = 0.0;
        }
        if matches!(self, AblationVariant::NoLcs | AblationVariant::BackboneOnly) {
            cfg.w_lcs = 0.0;
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub w_fsd: f64,
    pub w_lcs: f64,
    /// Average mAP over all evaluation thresholds, per seed.
    pub per_seed: Vec<(u64, f64)>,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// `(variant, full − variant)` for every other variant, when `full` ran.
    pub deltas: Vec<(AblationVariant, f64)>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Trains and evaluates one configuration, returning its mAP report.
pub fn evaluate_config(
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    infer: &InferConfig,
    eval: &EvalConfig,
) -> Result<MapReport> {
    let out = train(train_set, cfg)?;
    let dets = infer_dataset(test_set, &out.model.backbone, &out.store, infer)?;
    map_at(&dets, &ground_truth(test_set, eval.snippet_frames), test_set.n_classes, eval)
}

pub fn run_ablation(
    train_set: &Dataset,
    test_set: &Dataset,
    base: &TrainConfig,
    infer: &InferConfig,
    eval: &EvalConfig,
    variants: &[AblationVariant],
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ..variant.apply(base)
            };
            let report = evaluate_config(train_set, test_set, &cfg, infer, eval)?;
            per_seed.push((seed, report.avg_all));
        }
        let cfg = variant.apply(base);
        rows.push(AblationRow {
            variant,
            w_fsd: cfg.w_fsd,
            w_lcs: cfg.w_lcs,
            median: median(&per_seed.iter().map(|(_, m)| *m).collect::<Vec<_>>()),
            per_seed,
        });
    }
    let deltas = match rows.iter().find(|r| r.variant == AblationVariant::Full) {
        Some(full) => rows
            .iter()
            .filter(|r| r.variant != AblationVariant::Full)
            .map(|r| (r.variant, full.median - r.median))
            .collect(),
        None => Vec::new(),
    };
    Ok(AblationReport { rows, deltas })
}

impl AblationReport {
    pub fn row(&self, variant: AblationVariant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_csv(&self) -> String {
        let seeds: Vec<u64> = self.rows.first().map_or(Vec::new(), |r| r.per_seed.iter().map(|(s, _)| *s).collect());
        let mut out = String::from("variant,w_fsd,w_lcs");
        for s in &seeds {
            out.push_str(&format!(",seed_{s}"));
        }
        out.push_str(",median\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}", r.variant.name(), r.w_fsd, r.w_lcs));
            for (_, m) in &r.per_seed {
                out.push_str(&format!(",{m}"));
            }
            out.push_str(&format!(",{}\n", r.median));
        }
        if !self.deltas.is_empty() {
            out.push_str("\ncomparison,delta\n");
            for (v, d) in &self.deltas {
                out.push_str(&format!("full-{},{d}\n", v.name()));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(v: &str, s: f64, e: f64, c: usize, score: f64) -> Detection {
        Detection {
            video_id: v.into(),
            t_start: s,
            t_end: e,
            class_id: c,
            score,
        }
    }

    fn gt(v: &str, s: f64, e: f64, c: usize) -> GtSegment {
        GtSegment {
            video_id: v.into(),
            t_start: s,
            t_end: e,
            class_id: c,
        }
    }

    #[test]
    fn ap_examples() {
        let g = [gt("a", 0.0, 10.0, 0)];
        assert_eq!(average_precision(&[det("a", 1.0, 10.0, 0, 0.9)], &g, 0.5).ap, 1.0);
        let tp_fp = [det("a", 0.0, 10.0, 0, 0.9), det("a", 20.0, 30.0, 0, 0.8)];
        assert_eq!(average_precision(&tp_fp, &g, 0.5).ap, 1.0);
        let fp_tp = [det("a", 0.0, 10.0, 0, 0.8), det("a", 20.0, 30.0, 0, 0.9)];
        assert_eq!(average_precision(&fp_tp, &g, 0.5).ap, 0.5);
        assert_eq!(average_precision(&[], &g, 0.5).ap, 0.0);
        let none = average_precision(&tp_fp, &[], 0.5);
        assert_eq!((none.ap, none.has_gt), (0.0, false));
    }

    #[test]
    fn duplicates_are_false_positives_and_videos_are_separate() {
        let g = [gt("a", 0.0, 10.0, 0), gt("b", 0.0, 10.0, 0)];
        let dets = [
            det("a", 0.0, 10.0, 0, 0.9),
            det("a", 0.0, 10.0, 0, 0.8),
            det("b", 0.0, 10.0, 0, 0.7),
        ];
        // ranks: TP (1/1), FP, TP (2/3); envelope gives 1·½ + ⅔·½
        let ap = average_precision(&dets, &g, 0.5).ap;
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn greedy_matching_prefers_highest_overlap() {
        let g = [gt("a", 0.0, 10.0, 0), gt("a", 4.0, 14.0, 0)];
        let dets = [det("a", 4.0, 14.0, 0, 0.9), det("a", 0.0, 10.0, 0, 0.8)];
        assert_eq!(average_precision(&dets, &g, 0.5).ap, 1.0);
    }

    #[test]
    fn map_examples() {
        let gts = [gt("a", 0.0, 10.0, 0), gt("b", 5.0, 9.0, 1)];
        let perfect: Vec<Detection> = gts.iter().map(|g| det(&g.video_id, g.t_start, g.t_end, g.class_id, 1.0)).collect();
        let r = map_at(&perfect, &gts, 2, &EvalConfig::default()).unwrap();
        assert!(r.map.iter().all(|&m| m == 100.0));
        assert_eq!(r.avg_all, 100.0);
        assert_eq!(r.avg_01_05, Some(100.0));
        assert_eq!(r.avg_03_07, Some(100.0));
        let empty = map_at(&[], &gts, 2, &EvalConfig::default()).unwrap();
        assert!(empty.map.iter().all(|&m| m == 0.0));

        let toy = [
            det("a", 0.0, 10.0, 0, 0.9),
            det("b", 20.0, 30.0, 1, 0.9),
            det("b", 5.0, 9.0, 1, 0.8),
        ];
        let cfg = EvalConfig {
            tiou_thresholds: vec![0.5],
            ..EvalConfig::default()
        };
        let r = map_at(&toy, &gts, 2, &cfg).unwrap();
        assert_eq!(r.per_class_ap[0], vec![1.0, 0.5]);
        assert_eq!(r.map, vec![75.0]);
        assert_eq!(r.avg_03_07, Some(75.0));
    }

    #[test]
    fn classes_without_ground_truth_are_excluded() {
        let gts = [gt("a", 0.0, 10.0, 0)];
        let dets = [det("a", 0.0, 10.0, 0, 1.0), det("a", 0.0, 10.0, 2, 1.0)];
        let r = map_at(&dets, &gts, 3, &EvalConfig::default()).unwrap();
        assert_eq!(r.classes_without_gt, vec![1, 2]);
        assert_eq!(r.avg_all, 100.0);
        assert!(map_at(&dets, &gts, 2, &EvalConfig::default()).is_err());
    }

    #[test]
    fn csv_layout() {
        let gts = [gt("a", 0.0, 10.0, 0)];
        let cfg = EvalConfig {
            tiou_thresholds: vec![0.1, 0.2],
            ..EvalConfig::default()
        };
        let r = map_at(&[det("a", 0.0, 10.0, 0, 1.0)], &gts, 1, &cfg).unwrap();
        assert_eq!(
            r.to_csv(),
            "tiou,ap_class_0,map\n0.1,1,100\n0.2,1,100\navg_0.1_0.5,,100\navg_0.3_0.7,,\navg_all,,100\n"
        );
    }

    #[test]
    fn variants_and_median() {
        let base = TrainConfig::default();
        assert_eq!(AblationVariant::NoFsd.apply(&base).w_fsd, 0.0);
        assert_eq!(AblationVariant::NoFsd.apply(&base).w_lcs, 1.0);
        let b = AblationVariant::BackboneOnly.apply(&base);
        assert_eq!((b.w_fsd, b.w_lcs), (0.0, 0.0));
        assert_eq!(AblationVariant::parse("no_lcs").unwrap(), AblationVariant::NoLcs);
        assert!(AblationVariant::parse("bogus").is_err());
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn single_variant_ablation_and_determinism() {
        let data = crate::dataio::generate(&crate::dataio::SyntheticSpec {
            n_train: 8,
            n_test: 4,
            ..Default::default()
        })
        .unwrap();
        let base = TrainConfig {
            max_epochs: 2,
            projection_dim: 16,
            ..TrainConfig::default()
        };
        let variants = [AblationVariant::BackboneOnly, AblationVariant::BackboneOnly];
        let r = run_ablation(&data.train, &data.test, &base, &InferConfig::default(), &EvalConfig::default(), &variants[..1], &[0]).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert!(r.deltas.is_empty());
        let twice = run_ablation(&data.train, &data.test, &base, &InferConfig::default(), &EvalConfig::default(), &variants, &[0]).unwrap();
        assert_eq!(twice.rows[0].per_seed, twice.rows[1].per_seed);
        assert_eq!(twice.rows[0].per_seed, r.rows[0].per_seed);
        assert!(twice.to_csv().starts_with("variant,w_fsd,w_lcs,seed_0,median\nbackbone_only,0,0,"));
    }

    fn arb_case() -> impl Strategy<Value = (Vec<Detection>, Vec<GtSegment>)> {
        let gts = prop::collection::vec((0usize..2, 0.0f64..20.0, 1.0f64..6.0), 1..6);
        let dets = prop::collection::vec((0usize..2, 0.0f64..20.0, 1.0f64..6.0, 0.01f64..1.0), 0..12);
        (gts, dets).prop_map(|(g, d)| {
            let gts = g.into_iter().map(|(v, s, l)| gt(&format!("v{v}"), s, s + l, 0)).collect();
            let dets = d.into_iter().map(|(v, s, l, sc)| det(&format!("v{v}"), s, s + l, 0, sc)).collect();
            (dets, gts)
        })
    }

    proptest! {
        #[test]
        fn ap_monotone_in_threshold_and_bounded((dets, gts) in arb_case()) {
            let mut prev = f64::INFINITY;
            for k in 1..=9 {
                let ap = average_precision(&dets, &gts, k as f64 / 10.0).ap;
                prop_assert!((0.0..=1.0 + 1e-12).contains(&ap));
                prop_assert!(ap <= prev + 1e-12);
                prev = ap;
            }
        }

        #[test]
        fn ap_depends_only_on_ranking((dets, gts) in arb_case(), a in 0.1f64..5.0) {
            let rescaled: Vec<Detection> = dets.iter().map(|d| Detection { score: a * d.score, ..d.clone() }).collect();
            prop_assert_eq!(average_precision(&dets, &gts, 0.5).ap, average_precision(&rescaled, &gts, 0.5).ap);
        }

        #[test]
        fn ground_truth_as_detections_is_perfect((_, gts) in arb_case()) {
            let dets: Vec<Detection> = gts.iter().map(|g| det(&g.video_id, g.t_start, g.t_end, g.class_id, 1.0)).collect();
            let r = map_at(&dets, &gts, 1, &EvalConfig::default()).unwrap();
            prop_assert!(r.map.iter().all(|&m| m == 100.0), "{:?}", r.map);
        }
    }
}
