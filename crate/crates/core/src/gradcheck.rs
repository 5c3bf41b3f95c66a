//! Finite-difference verification of every training loss on small seeded
//! instances. Inputs of each loss are registered as parameters so that one
//! check covers model weights and input features alike.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff_optim::{check_gradients, GradCheckConfig, GradCheckReport, Gradients, ParamId, ParamStore};
use crate::backbone::{cls_loss, embed_backward, embed_with_cache, video_cls_backward, video_score, BackboneParams};
use crate::contrast::{fsd_loss, lcs_loss, HeadActivations, LcsPair, ProposalPairBatch, ResidualHeads};
use crate::dp_kernels::SmoothMaxMode;
use crate::error::Result;
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub instances: usize,
    pub seed: u64,
    pub gamma: f64,
    pub tau: f64,
    pub check: GradCheckConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            instances: 50,
            seed: 0,
            gamma: 10.0,
            tau: 0.92,
            check: GradCheckConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub instances: usize,
    pub cls: GradCheckReport,
    pub fsd: GradCheckReport,
    pub lcs: GradCheckReport,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cls.passed() && self.fsd.passed() && self.lcs.passed()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cls.max_rel_error.max(self.fsd.max_rel_error).max(self.lcs.max_rel_error)
    }

    pub fn summary(&self) -> String {
        let line = |name: &str, r: &GradCheckReport| {
            format!(
                "{name}: checked {} skipped {} failures {} max_rel_error {:.3e}",
                r.checked,
                r.skipped,
                r.failures.len(),
                r.max_rel_error
            )
        };
        format!(
            "{} instances\n{}\n{}\n{}",
            self.instances,
            line("L_cls", &self.cls),
            line("L_FSD", &self.fsd),
            line("L_LCS", &self.lcs)
        )
    }
}

const EMBED_IN: usize = 4;
const EMBED_DIM: usize = 5;
const PROJECTION: usize = 4;
const CLASSES: usize = 3;

fn random_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn add_input(store: &mut ParamStore, name: &str, rows: usize, cols: usize, values: Vec<f64>) -> Result<ParamId> {
    store.add(name, &[rows, cols], values)
}

fn input(store: &ParamStore, id: ParamId) -> Matrix {
    let shape = &store.entry(id).shape;
    Matrix::from_vec(shape[0], shape[1], store.value(id).to_vec()).expect("registered shape")
}

fn write_grad(grads: &mut Gradients, id: ParamId, d: &Matrix) {
    for (g, v) in grads.get_mut(id).iter_mut().zip(d.as_slice()) {
        *g += v;
    }
}

fn cls_instance(rng: &mut ChaCha8Rng, check: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let params = BackboneParams::init(&mut store, EMBED_IN, EMBED_DIM, CLASSES, 1, rng)?;
    let t = rng.random_range(3..8);
    let raw = add_input(&mut store, "features", t, EMBED_IN, random_values(rng, t * EMBED_IN))?;
    let mut labels: Vec<f64> = (0..CLASSES).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
    labels[rng.random_range(0..CLASSES)] = 1.0;
    check_gradients(
        |s, g| {
            let (x, cache) = embed_with_cache(&input(s, raw), &params, s)?;
            let score = video_score(&x, &params, s)?;
            let dx = video_cls_backward(&x, &score, &labels, 1.0, &params, s, g)?;
            let d_raw = embed_backward(&params, s, &cache, &dx, g);
            write_grad(g, raw, &d_raw);
            cls_loss(&score.probs, &labels)
        },
        &mut store,
        check,
    )
}

fn fsd_instance(rng: &mut ChaCha8Rng, gamma: f64, check: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let share = rng.random_bool(0.5);
    let heads = ResidualHeads::init(&mut store, EMBED_DIM, PROJECTION, share, HeadActivations::default(), rng)?;
    let seq = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
        let m = rng.random_range(2..6);
        add_input(store, name, m, EMBED_DIM, random_values(rng, m * EMBED_DIM))
    };
    let u = seq(&mut store, "u", rng)?;
    let v = seq(&mut store, "v", rng)?;
    let u_bg = seq(&mut store, "u_bg", rng)?;
    let v_bg = seq(&mut store, "v_bg", rng)?;
    // a wide margin keeps both hinge terms active
    let margin = 20.0;
    let mode = SmoothMaxMode::Normalized { gamma };
    check_gradients(
        |s, g| {
            let batch = ProposalPairBatch {
                u: input(s, u),
                v: input(s, v),
                u_bg: input(s, u_bg),
                v_bg: input(s, v_bg),
                class_id: 0,
            };
            let out = fsd_loss(&heads, s, &batch, mode, margin, 1.0, g)?;
            write_grad(g, u, &out.d_u);
            write_grad(g, v, &out.d_v);
            write_grad(g, u_bg, &out.d_u_bg);
            write_grad(g, v_bg, &out.d_v_bg);
            Ok(out.loss)
        },
        &mut store,
        check,
    )
}

fn lcs_instance(rng: &mut ChaCha8Rng, tau: f64, check: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let tx = rng.random_range(3..7);
    let tz = rng.random_range(3..7);
    let xv = random_values(rng, tx * EMBED_DIM);
    // z mixes perturbed copies of x rows (similarities near 1) with fresh rows
    let mut zv = Vec::with_capacity(tz * EMBED_DIM);
    for _ in 0..tz {
        if rng.random_bool(0.6) {
            let src = rng.random_range(0..tx);
            zv.extend(xv[src * EMBED_DIM..(src + 1) * EMBED_DIM].iter().map(|a| a + rng.random_range(-0.1..0.1)));
        } else {
            zv.extend(random_values(rng, EMBED_DIM));
        }
    }
    let x = add_input(&mut store, "x_sel", tx, EMBED_DIM, xv)?;
    let z = add_input(&mut store, "z_sel", tz, EMBED_DIM, zv)?;
    let delta = rng.random_bool(0.5);
    check_gradients(
        |s, g| {
            let pair = LcsPair {
                x_sel: input(s, x),
                z_sel: input(s, z),
                delta,
            };
            let out = lcs_loss(&pair, tau, 1.0)?;
            write_grad(g, x, &out.d_x);
            write_grad(g, z, &out.d_z);
            Ok(out.loss)
        },
        &mut store,
        check,
    )
}

/// Runs the classification, FSD and LCS checks on `instances` seeded
/// problems each.
pub fn gradient_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let mut report = SuiteReport {
        instances: cfg.instances,
        ..SuiteReport::default()
    };
    for k in 0..cfg.instances {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64);
        let check = GradCheckConfig {
            seed: cfg.seed.wrapping_add(k as u64),
            ..cfg.check.clone()
        };
        report.cls.merge(cls_instance(&mut rng, &check)?);
        report.fsd.merge(fsd_instance(&mut rng, cfg.gamma, &check)?);
        report.lcs.merge(lcs_instance(&mut rng, cfg.tau, &check)?);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let report = gradient_suite(&SuiteConfig {
            instances: 4,
            ..SuiteConfig::default()
        })
        .unwrap();
        assert!(report.passed(), "{}", report.summary());
        assert!(report.lcs.checked > 0 && report.fsd.checked > 0 && report.cls.checked > 0);
    }
}
