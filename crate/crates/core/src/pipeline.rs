//! Training orchestration: proposal and top-J selection, video pairing,
//! joint loss assembly and the epoch loop.
//!
//! Per batch, every video runs through the backbone once. Classification,
//! FSD and LCS terms are evaluated as independent work items with private
//! gradient buffers (in parallel when threads are available) and merged in
//! a fixed order: videos, then FSD pairs, then LCS pairs. Feature gradients
//! are scattered back per video before a single embedding backward pass.

use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff_optim::{adam_step, AdamConfig, Gradients, ParamStore};
use crate::backbone::{cls_loss, embed_backward, embed_with_cache, video_cls_backward, video_score, BackboneParams, EmbedCache, VideoScore};
use crate::contrast::{fsd_loss, lcs_loss, HeadActivations, LcsPair, ProposalPairBatch, ResidualHeads};
use crate::dataio::{Dataset, VideoRecord};
use crate::dp_kernels::SmoothMaxMode;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Smooth-max flavour used by the FSD recursion during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothKind {
    #[default]
    Normalized,
    Unnormalized,
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub gamma: f64,
    pub smooth: SmoothKind,
    pub tau: f64,
    pub top_j: usize,
    pub margin: f64,
    pub proposal_len: usize,
    pub n_pos_pairs: usize,
    pub n_neg_pairs: usize,
    pub w_fsd: f64,
    pub w_lcs: f64,
    pub lr: f64,
    pub max_epochs: usize,
    /// Stop once the epoch loss changes by less than this relative amount
    /// over `plateau_window` epochs; a window of 0 disables the check.
    pub plateau_tol: f64,
    pub plateau_window: usize,
    pub embed_dim: usize,
    pub embed_depth: usize,
    pub projection_dim: usize,
    pub share_h: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            gamma: 10.0,
            smooth: SmoothKind::Normalized,
            tau: 0.92,
            top_j: 30,
            margin: 0.5,
            proposal_len: 8,
            n_pos_pairs: 4,
            n_neg_pairs: 4,
            w_fsd: 1.0,
            w_lcs: 1.0,
            lr: 1e-3,
            max_epochs: 30,
            plateau_tol: 1e-4,
            plateau_window: 5,
            embed_dim: 32,
            embed_depth: 1,
            projection_dim: 1024,
            share_h: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn smooth_mode(&self) -> SmoothMaxMode {
        match self.smooth {
            SmoothKind::Normalized => SmoothMaxMode::Normalized { gamma: self.gamma },
            SmoothKind::Unnormalized => SmoothMaxMode::Unnormalized { gamma: self.gamma },
            SmoothKind::Hard => SmoothMaxMode::Hard,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("top_j", self.top_j),
            ("proposal_len", self.proposal_len),
            ("max_epochs", self.max_epochs),
            ("embed_dim", self.embed_dim),
            ("embed_depth", self.embed_depth),
            ("projection_dim", self.projection_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig("tau must lie in [-1, 1]".into()));
        }
        let non_negative = [
            ("margin", self.margin),
            ("w_fsd", self.w_fsd),
            ("w_lcs", self.w_lcs),
            ("plateau_tol", self.plateau_tol),
        ];
        if let Some((name, _)) = non_negative.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig(format!("{name} must be finite and non-negative")));
        }
        self.smooth_mode().validate()?;
        self.adam().validate()
    }
}

/// Backbone plus the residual heads used by the FSD loss.
#[derive(Clone, Debug, PartialEq)]
pub struct FtclModel {
    pub backbone: BackboneParams,
    pub heads: ResidualHeads,
}

impl FtclModel {
    /// Registers backbone parameters first, then the heads, so variants that
    /// differ only in loss weights share the same backbone initialization.
    pub fn init(store: &mut ParamStore, input_dim: usize, n_classes: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let backbone = BackboneParams::init(store, input_dim, cfg.embed_dim, n_classes, cfg.embed_depth, rng)?;
        let heads = ResidualHeads::init(
            store,
            cfg.embed_dim,
            cfg.projection_dim,
            cfg.share_h,
            HeadActivations::default(),
            rng,
        )?;
        Ok(Self { backbone, heads })
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            backbone: BackboneParams::from_store(store)?,
            heads: ResidualHeads::from_store(store, HeadActivations::default())?,
        })
    }
}

fn by_alpha_desc(alpha: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..alpha.len()).collect();
    order.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]).then(a.cmp(&b)));
    order
}

/// Action proposal = top-`m` snippets by attention, background = bottom-`m`,
/// both in time order. When `T < 2m` the ranking is split in half, the
/// extra snippet going to the action side.
pub fn select_proposals(alpha: &[f64], m: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let t = alpha.len();
    if t == 0 {
        return Err(Error::EmptyInput);
    }
    let order = by_alpha_desc(alpha);
    let (n_act, n_bg) = if t >= 2 * m { (m, m) } else { (t.div_ceil(2), t / 2) };
    let mut action = order[..n_act].to_vec();
    let mut background = order[t - n_bg..].to_vec();
    action.sort_unstable();
    background.sort_unstable();
    Ok((action, background))
}

/// The `j` highest-attention snippets (all of them if `T ≤ j`) in time
/// order.
pub fn select_top_j(alpha: &[f64], j: usize) -> Vec<usize> {
    let mut top = by_alpha_desc(alpha);
    top.truncate(j);
    top.sort_unstable();
    top
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FsdPairPlan {
    pub a: usize,
    pub b: usize,
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LcsPairPlan {
    pub a: usize,
    pub b: usize,
    pub delta: bool,
}

/// Video pairs (indices into the batch) contrasted in one step.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairPlan {
    pub fsd_pairs: Vec<FsdPairPlan>,
    pub lcs_pairs: Vec<LcsPairPlan>,
}

impl PairPlan {
    pub fn is_empty(&self) -> bool {
        self.fsd_pairs.is_empty() && self.lcs_pairs.is_empty()
    }
}

/// Samples up to `n_pos_pairs` class-sharing pairs and `n_neg_pairs`
/// label-disjoint pairs uniformly without replacement. Positive pairs feed
/// both losses; negative pairs only the LCS loss.
pub fn build_pairs(batch: &[&VideoRecord], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> PairPlan {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for a in 0..batch.len() {
        for b in a + 1..batch.len() {
            match batch[a].shared_class(batch[b]) {
                Some(c) => positives.push(FsdPairPlan { a, b, class_id: c }),
                None => negatives.push((a, b)),
            }
        }
    }
    let pos: Vec<FsdPairPlan> = positives.choose_multiple(rng, cfg.n_pos_pairs).copied().collect();
    let neg: Vec<(usize, usize)> = negatives.choose_multiple(rng, cfg.n_neg_pairs).copied().collect();
    let lcs_pairs = pos
        .iter()
        .map(|p| LcsPairPlan { a: p.a, b: p.b, delta: true })
        .chain(neg.iter().map(|&(a, b)| LcsPairPlan { a, b, delta: false }))
        .collect();
    PairPlan {
        fsd_pairs: pos,
        lcs_pairs,
    }
}

/// Per-term means of one batch. Missing pair categories contribute 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub fsd: f64,
    pub lcs: f64,
}

impl LossBreakdown {
    pub fn compose(cls: f64, fsd: f64, lcs: f64, w_fsd: f64, w_lcs: f64) -> Self {
        Self {
            total: cls + w_fsd * fsd + w_lcs * lcs,
            cls,
            fsd,
            lcs,
        }
    }
}

struct VideoForward {
    x: Matrix,
    cache: EmbedCache,
    score: VideoScore,
    labels: Vec<f64>,
    action: Vec<usize>,
    background: Vec<usize>,
    top_j: Vec<usize>,
}

/// Private result of one work item: loss, parameter gradients and feature
/// gradients addressed by (video, snippet indices).
struct ItemOutput {
    loss: f64,
    grads: Gradients,
    feature_grads: Vec<(usize, Vec<usize>, Matrix)>,
}

enum WorkItem {
    Cls(usize),
    Fsd(FsdPairPlan),
    Lcs(LcsPairPlan),
}

fn mean(total: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Evaluates the joint objective on `batch` and adds its gradient to
/// `grads`. Contrastive terms with zero weight are skipped entirely, so the
/// zero-weight objective is exactly the classification loss.
pub fn total_loss(
    model: &FtclModel,
    store: &ParamStore,
    batch: &[&VideoRecord],
    plan: &PairPlan,
    cfg: &TrainConfig,
    grads: &mut Gradients,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let forwards = batch
        .par_iter()
        .map(|v| {
            let (x, cache) = embed_with_cache(&v.features, &model.backbone, store)?;
            let score = video_score(&x, &model.backbone, store)?;
            let (action, background) = select_proposals(&score.alpha, cfg.proposal_len)?;
            let top_j = select_top_j(&score.alpha, cfg.top_j);
            Ok(VideoForward {
                x,
                cache,
                score,
                labels: v.label_vector(),
                action,
                background,
                top_j,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n_videos = batch.len();
    let use_fsd = cfg.w_fsd != 0.0 && !plan.fsd_pairs.is_empty();
    let use_lcs = cfg.w_lcs != 0.0 && !plan.lcs_pairs.is_empty();
    let mut items: Vec<WorkItem> = (0..n_videos).map(WorkItem::Cls).collect();
    if use_fsd {
        items.extend(plan.fsd_pairs.iter().copied().map(WorkItem::Fsd));
    }
    if use_lcs {
        items.extend(plan.lcs_pairs.iter().copied().map(WorkItem::Lcs));
    }
    let fsd_weight = cfg.w_fsd / plan.fsd_pairs.len().max(1) as f64;
    let lcs_weight = cfg.w_lcs / plan.lcs_pairs.len().max(1) as f64;
    let mode = cfg.smooth_mode();

    let outputs = items
        .par_iter()
        .map(|item| -> Result<ItemOutput> {
            let mut g = Gradients::zeros_for(store);
            match *item {
                WorkItem::Cls(i) => {
                    let f = &forwards[i];
                    let loss = cls_loss(&f.score.probs, &f.labels)?;
                    let upstream = 1.0 / n_videos as f64;
                    let dx = video_cls_backward(&f.x, &f.score, &f.labels, upstream, &model.backbone, store, &mut g)?;
                    let all: Vec<usize> = (0..f.x.rows()).collect();
                    Ok(ItemOutput {
                        loss,
                        grads: g,
                        feature_grads: vec![(i, all, dx)],
                    })
                }
                WorkItem::Fsd(p) => {
                    let (fa, fb) = (&forwards[p.a], &forwards[p.b]);
                    let pair = ProposalPairBatch {
                        u: fa.x.select_rows(&fa.action),
                        v: fb.x.select_rows(&fb.action),
                        u_bg: fa.x.select_rows(&fa.background),
                        v_bg: fb.x.select_rows(&fb.background),
                        class_id: p.class_id,
                    };
                    let out = fsd_loss(&model.heads, store, &pair, mode, cfg.margin, fsd_weight, &mut g)?;
                    Ok(ItemOutput {
                        loss: out.loss,
                        grads: g,
                        feature_grads: vec![
                            (p.a, fa.action.clone(), out.d_u),
                            (p.b, fb.action.clone(), out.d_v),
                            (p.a, fa.background.clone(), out.d_u_bg),
                            (p.b, fb.background.clone(), out.d_v_bg),
                        ],
                    })
                }
                WorkItem::Lcs(p) => {
                    let (fa, fb) = (&forwards[p.a], &forwards[p.b]);
                    let pair = LcsPair {
                        x_sel: fa.x.select_rows(&fa.top_j),
                        z_sel: fb.x.select_rows(&fb.top_j),
                        delta: p.delta,
                    };
                    let out = lcs_loss(&pair, cfg.tau, lcs_weight)?;
                    Ok(ItemOutput {
                        loss: out.loss,
                        grads: g,
                        feature_grads: vec![(p.a, fa.top_j.clone(), out.d_x), (p.b, fb.top_j.clone(), out.d_z)],
                    })
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut d_x: Vec<Matrix> = forwards.iter().map(|f| Matrix::zeros(f.x.rows(), f.x.cols())).collect();
    let (mut cls_sum, mut fsd_sum, mut lcs_sum) = (0.0, 0.0, 0.0);
    for (item, out) in items.iter().zip(&outputs) {
        match item {
            WorkItem::Cls(_) => cls_sum += out.loss,
            WorkItem::Fsd(_) => fsd_sum += out.loss,
            WorkItem::Lcs(_) => lcs_sum += out.loss,
        }
        grads.add_assign(&out.grads);
        for (v, idx, d) in &out.feature_grads {
            d_x[*v].scatter_add_rows(idx, d);
        }
    }
    drop(outputs);

    let embed_grads = forwards
        .par_iter()
        .zip(&d_x)
        .map(|(f, d)| {
            let mut g = Gradients::zeros_for(store);
            embed_backward(&model.backbone, store, &f.cache, d, &mut g);
            g
        })
        .collect::<Vec<_>>();
    for g in &embed_grads {
        grads.add_assign(g);
    }

    let fsd = if use_fsd { mean(fsd_sum, plan.fsd_pairs.len()) } else { 0.0 };
    let lcs = if use_lcs { mean(lcs_sum, plan.lcs_pairs.len()) } else { 0.0 };
    Ok(LossBreakdown::compose(mean(cls_sum, n_videos), fsd, lcs, cfg.w_fsd, cfg.w_lcs))
}

/// Mean batch losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: FtclModel,
    pub store: ParamStore,
    pub log: Vec<EpochLog>,
}

/// Random-stream layout derived from the training seed.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_PAIRS: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Initializes a model for `data` using the configured seed.
pub fn init_model(data: &Dataset, cfg: &TrainConfig) -> Result<(FtclModel, ParamStore)> {
    let first = data.videos.first().ok_or(Error::EmptyInput)?;
    let mut store = ParamStore::new();
    let mut rng = stream(cfg.seed, STREAM_INIT);
    let model = FtclModel::init(&mut store, first.features.cols(), data.n_classes, cfg, &mut rng)?;
    Ok((model, store))
}

fn plateaued(log: &[EpochLog], cfg: &TrainConfig) -> bool {
    let w = cfg.plateau_window;
    if w == 0 || log.len() <= w {
        return false;
    }
    let now = log[log.len() - 1].loss.total;
    let before = log[log.len() - 1 - w].loss.total;
    (now - before).abs() <= cfg.plateau_tol * before.abs().max(f64::MIN_POSITIVE)
}

/// Runs seeded shuffled epochs until `max_epochs` or a loss plateau.
pub fn train(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.videos.is_empty() {
        return Err(Error::EmptyInput);
    }
    for v in &data.videos {
        if !v.is_labeled() {
            return Err(Error::UnlabeledVideo);
        }
        if v.labels.len() != data.n_classes {
            return Err(Error::dims(format!("video {} label length", v.video_id)));
        }
    }
    let (model, mut store) = init_model(data, cfg)?;
    let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE);
    let mut pair_rng = stream(cfg.seed, STREAM_PAIRS);
    let adam = cfg.adam();
    let mut order: Vec<usize> = (0..data.videos.len()).collect();
    let mut log = Vec::with_capacity(cfg.max_epochs);

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossBreakdown::default();
        let mut n_batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&VideoRecord> = chunk.iter().map(|&i| &data.videos[i]).collect();
            let plan = build_pairs(&batch, cfg, &mut pair_rng);
            let mut grads = Gradients::zeros_for(&store);
            let loss = total_loss(&model, &store, &batch, &plan, cfg, &mut grads)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            store.zero_grads();
            store.accumulate(&grads);
            adam_step(&mut store, &adam)?;
            sums.total += loss.total;
            sums.cls += loss.cls;
            sums.fsd += loss.fsd;
            sums.lcs += loss.lcs;
            n_batches += 1;
        }
        let n = n_batches as f64;
        log.push(EpochLog {
            epoch,
            loss: LossBreakdown {
                total: sums.total / n,
                cls: sums.cls / n,
                fsd: sums.fsd / n,
                lcs: sums.lcs / n,
            },
        });
        if plateaued(&log, cfg) {
            break;
        }
    }
    Ok(TrainOutcome { model, store, log })
}

pub fn write_loss_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,L,L_cls,L_FSD,L_LCS\n");
    for e in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.loss.total, e.loss.cls, e.loss.fsd, e.loss.lcs
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
