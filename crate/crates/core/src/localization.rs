//! Inference: class-activation thresholding, grouping into proposals,
//! outer-inner scoring and class-wise non-maximum suppression.

use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff_optim::ParamStore;
use crate::backbone::{cas, embed, video_score, BackboneParams};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Detection `(t_start, t_end, class, score)` with times in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub t_start: f64,
    pub t_end: f64,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalScoring {
    /// Inner mean minus the mean over flanking snippets.
    #[default]
    OuterInner,
    InnerMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    /// Thresholds applied to the max-normalized class activation.
    pub cas_thresholds: Vec<f64>,
    pub nms_tiou: f64,
    pub outer_margin: f64,
    pub scoring: ProposalScoring,
    /// Classes with `ỹ_c ≥ class_gate · max ỹ` are localized.
    pub class_gate: f64,
    pub fps: f64,
    pub snippet_frames: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            cas_thresholds: (1..=9).map(|k| k as f64 / 10.0).collect(),
            nms_tiou: 0.5,
            outer_margin: 0.25,
            scoring: ProposalScoring::OuterInner,
            class_gate: 0.1,
            fps: 25.0,
            snippet_frames: 16,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cas_thresholds.is_empty() || self.cas_thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::InvalidConfig("cas_thresholds must be non-empty and lie in (0, 1)".into()));
        }
        if !(self.nms_tiou > 0.0 && self.nms_tiou <= 1.0) {
            return Err(Error::InvalidConfig("nms_tiou must lie in (0, 1]".into()));
        }
        if !(self.outer_margin >= 0.0 && self.outer_margin.is_finite()) {
            return Err(Error::InvalidConfig("outer_margin must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.class_gate) {
            return Err(Error::InvalidConfig("class_gate must lie in [0, 1]".into()));
        }
        if !(self.fps > 0.0) || self.snippet_frames == 0 {
            return Err(Error::InvalidConfig("fps and snippet_frames must be positive".into()));
        }
        Ok(())
    }

    /// Duration of one snippet in seconds.
    pub fn snippet_seconds(&self) -> f64 {
        self.snippet_frames as f64 / self.fps
    }
}

/// Maximal runs of indices with `score ≥ threshold`.
pub fn group_segments(scores: &[f64], threshold: f64) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &s) in scores.iter().enumerate() {
        match (s >= threshold, start) {
            (true, None) => start = Some(t),
            (false, Some(st)) => {
                out.push(st..t);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(st) = start {
        out.push(st..scores.len());
    }
    out
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Outer-inner contrast: the inner mean minus the mean over flanks of width
/// `ceil(outer_margin · len)` on each side, clipped to the sequence. Without
/// flanks the inner mean is returned.
pub fn score_proposal(scores: &[f64], seg: Range<usize>, outer_margin: f64) -> Result<f64> {
    if seg.is_empty() || seg.end > scores.len() {
        return Err(Error::EmptySegment);
    }
    let inner = mean(&scores[seg.clone()]);
    let width = (outer_margin * seg.len() as f64).ceil() as usize;
    let left = &scores[seg.start.saturating_sub(width)..seg.start];
    let right = &scores[seg.end..(seg.end + width).min(scores.len())];
    let n = left.len() + right.len();
    if n == 0 {
        return Ok(inner);
    }
    let outer = (left.iter().sum::<f64>() + right.iter().sum::<f64>()) / n as f64;
    Ok(inner - outer)
}

/// Temporal intersection over union of two half-open intervals.
pub fn t_iou(a: (f64, f64), b: (f64, f64)) -> Result<f64> {
    for iv in [a, b] {
        if !(iv.1 > iv.0) {
            return Err(Error::EmptyInterval(iv.0, iv.1));
        }
    }
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    Ok(inter / union)
}

fn by_score_desc(a: &Proposal, b: &Proposal) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.t_start.total_cmp(&b.t_start))
}

/// Greedy class-wise NMS: a proposal survives iff its t-IoU with every
/// kept proposal of the same class is below `tiou_thresh`. Output is sorted
/// by score descending.
pub fn nms(props: &[Proposal], tiou_thresh: f64) -> Vec<Proposal> {
    let mut sorted = props.to_vec();
    sorted.sort_by(by_score_desc);
    let mut kept: Vec<Proposal> = Vec::new();
    for p in sorted {
        let suppressed = kept.iter().any(|k| {
            k.class_id == p.class_id
                && t_iou((k.t_start, k.t_end), (p.t_start, p.t_end)).is_ok_and(|iou| iou >= tiou_thresh)
        });
        if !suppressed {
            kept.push(p);
        }
    }
    kept
}

/// Classes whose video-level probability passes the relative gate; the
/// top-1 class always does.
pub fn gated_classes(probs: &[f64], gate: f64) -> Vec<usize> {
    let top = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= gate * top)
        .map(|(c, _)| c)
        .collect()
}

/// Detections from a class activation sequence (`T × C`) for the given
/// classes. Thresholds apply to each class column normalized by its
/// maximum; proposals are scored on the raw activations.
pub fn localize_cas(cas: &Matrix, classes: &[usize], cfg: &InferConfig) -> Result<Vec<Proposal>> {
    let dt = cfg.snippet_seconds();
    let mut props = Vec::new();
    for &c in classes {
        if c >= cas.cols() {
            return Err(Error::dims(format!("class {c} out of range")));
        }
        let column = cas.column(c);
        let peak = column.iter().copied().fold(0.0, f64::max);
        if !(peak > 0.0) {
            continue;
        }
        let normalized: Vec<f64> = column.iter().map(|v| v / peak).collect();
        for &thr in &cfg.cas_thresholds {
            for seg in group_segments(&normalized, thr) {
                let score = match cfg.scoring {
                    ProposalScoring::OuterInner => score_proposal(&column, seg.clone(), cfg.outer_margin)?,
                    ProposalScoring::InnerMean => score_proposal(&column, seg.clone(), 0.0)?,
                };
                props.push(Proposal {
                    t_start: seg.start as f64 * dt,
                    t_end: seg.end as f64 * dt,
                    class_id: c,
                    score,
                });
            }
        }
    }
    Ok(nms(&props, cfg.nms_tiou))
}

/// Full inference for one video's raw features.
pub fn localize(features: &Matrix, params: &BackboneParams, store: &ParamStore, cfg: &InferConfig) -> Result<Vec<Proposal>> {
    if features.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let x = embed(features, params, store)?;
    let probs = video_score(&x, params, store)?.probs;
    let activation = cas(&x, params, store)?;
    localize_cas(&activation.matrix, &gated_classes(&probs, cfg.class_gate), cfg)
}

/// One line of the detections file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub t_start: f64,
    pub t_end: f64,
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(video_id: &str, p: Proposal) -> Self {
        Self {
            video_id: video_id.to_owned(),
            t_start: p.t_start,
            t_end: p.t_end,
            class_id: p.class_id,
            score: p.score,
        }
    }
}

/// Localizes every video, converting snippets to seconds with the video's
/// own frame rate. Output is grouped by video in dataset order, each group
/// sorted by score.
pub fn infer_dataset(data: &Dataset, params: &BackboneParams, store: &ParamStore, cfg: &InferConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let per_video = data
        .videos
        .par_iter()
        .map(|v| {
            let vcfg = InferConfig {
                fps: v.fps,
                ..cfg.clone()
            };
            let props = localize(&v.features, params, store, &vcfg)?;
            Ok(props.into_iter().map(|p| Detection::new(&v.video_id, p)).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_video.into_iter().flatten().collect())
}

pub fn write_detections(path: impl AsRef<Path>, dets: &[Detection]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for d in dets {
        out.push_str(&serde_json::to_string(d)?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn prop(s: f64, e: f64, c: usize, score: f64) -> Proposal {
        Proposal {
            t_start: s,
            t_end: e,
            class_id: c,
            score,
        }
    }

    #[test]
    fn grouping_examples() {
        assert_eq!(group_segments(&[0.1, 0.8, 0.9, 0.2], 0.5), vec![1..3]);
        assert!(group_segments(&[0.1, 0.2], 0.5).is_empty());
        assert_eq!(group_segments(&[0.6, 0.7, 0.8], 0.5), vec![0..3]);
        assert_eq!(group_segments(&[0.6, 0.1, 0.8], 0.5), vec![0..1, 2..3]);
    }

    #[test]
    fn scoring_examples() {
        let s = [0.0, 1.0, 1.0, 0.0];
        assert_eq!(score_proposal(&s, 1..3, 0.25).unwrap(), 1.0);
        assert_eq!(score_proposal(&[0.4; 6], 2..4, 0.25).unwrap(), 0.0);
        assert_eq!(score_proposal(&[0.3, 0.5], 0..2, 0.25).unwrap(), 0.4);
        assert!(matches!(score_proposal(&s, 2..2, 0.25), Err(Error::EmptySegment)));
        // flank clipped on the left: width ceil(0.25·2) = 1, only the right flank exists
        assert_eq!(score_proposal(&[1.0, 1.0, 0.5, 0.0], 0..2, 0.25).unwrap(), 0.5);
    }

    #[test]
    fn t_iou_examples() {
        assert_eq!(t_iou((0.0, 10.0), (5.0, 15.0)).unwrap(), 1.0 / 3.0);
        assert_eq!(t_iou((0.0, 10.0), (0.0, 10.0)).unwrap(), 1.0);
        assert_eq!(t_iou((0.0, 1.0), (2.0, 3.0)).unwrap(), 0.0);
        assert!(matches!(t_iou((1.0, 1.0), (0.0, 2.0)), Err(Error::EmptyInterval(..))));
    }

    #[test]
    fn nms_examples() {
        let kept = nms(&[prop(0.0, 10.0, 0, 0.9), prop(2.0, 12.0, 0, 0.8)], 0.5);
        assert_eq!(kept, vec![prop(0.0, 10.0, 0, 0.9)]);
        let kept = nms(&[prop(2.0, 12.0, 1, 0.8), prop(0.0, 10.0, 0, 0.9)], 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].score, 0.9);
        let single = [prop(1.0, 2.0, 3, 0.1)];
        assert_eq!(nms(&single, 0.5), single.to_vec());
    }

    #[test]
    fn gate_keeps_top_and_relative_classes() {
        assert_eq!(gated_classes(&[0.5, 0.04, 0.46], 0.1), vec![0, 2]);
        assert_eq!(gated_classes(&[0.2, 0.2, 0.6], 0.5), vec![2]);
    }

    #[test]
    fn zero_cas_gives_no_detections() {
        let cas = Matrix::zeros(10, 3);
        assert!(localize_cas(&cas, &[0, 1, 2], &InferConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn single_block_gives_one_detection() {
        let mut cas = Matrix::zeros(10, 2);
        for t in 3..6 {
            cas[(t, 1)] = 0.8;
        }
        let cfg = InferConfig {
            cas_thresholds: vec![0.5],
            ..InferConfig::default()
        };
        let dets = localize_cas(&cas, &[1], &cfg).unwrap();
        let dt = 16.0 / 25.0;
        assert_eq!(dets.len(), 1);
        assert_eq!((dets[0].t_start, dets[0].t_end, dets[0].class_id), (3.0 * dt, 6.0 * dt, 1));
        assert!((dets[0].score - 0.8).abs() < 1e-12);
    }

    #[test]
    fn nested_plateau_sweep_collapses_per_region() {
        // region A: a stepped plateau; region B: a flat block
        let col = [0.0, 0.5, 1.0, 1.0, 1.0, 1.0, 0.5, 0.0, 0.0, 0.0, 0.7, 0.7, 0.7, 0.0, 0.0];
        let cas = Matrix::from_vec(col.len(), 1, col.to_vec()).unwrap();
        let dets = localize_cas(&cas, &[0], &InferConfig::default()).unwrap();
        let dt = InferConfig::default().snippet_seconds();
        let in_a = |p: &Proposal| p.t_end <= 7.0 * dt + 1e-9;
        assert_eq!(dets.iter().filter(|p| in_a(p)).count(), 1, "{dets:?}");
        assert_eq!(dets.iter().filter(|p| !in_a(p)).count(), 1, "{dets:?}");
    }

    #[test]
    fn detections_round_trip_as_json_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dets.jsonl");
        let dets = vec![
            Detection::new("v1", prop(0.0, 1.28, 2, 0.75)),
            Detection::new("v2", prop(3.2, 6.4, 0, -0.125)),
        ];
        write_detections(&path, &dets).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            r#"{"video_id":"v1","t_start":0.0,"t_end":1.28,"class":2,"score":0.75}"#
        );
        assert_eq!(read_detections(&path).unwrap(), dets);
    }

    fn arb_props() -> impl Strategy<Value = Vec<Proposal>> {
        prop::collection::vec((0.0f64..20.0, 0.1f64..8.0, 0usize..3, 0.0f64..1.0), 0..25)
            .prop_map(|v| v.into_iter().map(|(s, l, c, sc)| prop(s, s + l, c, sc)).collect())
    }

    proptest! {
        #[test]
        fn nms_invariants(props in arb_props(), thr in 0.05f64..1.0) {
            let kept = nms(&props, thr);
            let mut sorted = props.clone();
            sorted.sort_by(by_score_desc);
            // subsequence of the sorted input
            let mut it = sorted.iter();
            for k in &kept {
                prop_assert!(it.any(|p| p == k));
            }
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    if a.class_id == b.class_id {
                        prop_assert!(t_iou((a.t_start, a.t_end), (b.t_start, b.t_end)).unwrap() < thr);
                    }
                }
            }
        }

        #[test]
        fn grouping_covers_exactly_the_superthreshold_indices(scores in prop::collection::vec(0.0f64..1.0, 1..40), thr in 0.0f64..1.0) {
            let segs = group_segments(&scores, thr);
            let mut covered = vec![false; scores.len()];
            for w in segs.windows(2) {
                prop_assert!(w[0].end < w[1].start);
            }
            for s in &segs {
                prop_assert!(!s.is_empty());
                for t in s.clone() {
                    covered[t] = true;
                }
            }
            for (t, &s) in scores.iter().enumerate() {
                prop_assert_eq!(covered[t], s >= thr);
            }
        }

        #[test]
        fn t_iou_symmetric_and_bounded(a in 0.0f64..10.0, la in 0.01f64..5.0, b in 0.0f64..10.0, lb in 0.01f64..5.0) {
            let x = t_iou((a, a + la), (b, b + lb)).unwrap();
            let y = t_iou((b, b + lb), (a, a + la)).unwrap();
            prop_assert_eq!(x, y);
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }
}
