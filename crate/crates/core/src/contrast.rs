//! Sequence-to-sequence contrasting: residual heads feeding the FSD
//! recursion, the FSD ranking loss, and the LCS cross-entropy constraint.
//!
//! Residuals come from cosine similarities of projected snippets,
//! `μ(i,j) = σ_μ(cos(f_μ(u_i), f_μ(v_j)))` and likewise for `g`, `h`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff_optim::{Gradients, ParamStore};
use crate::dp_kernels::{fsd_backward, fsd_forward, lcs_backward, lcs_forward, FsdInputs, LcsInputs, SmoothMaxMode};
use crate::error::{Error, Result};
use crate::layers::{Activation, Linear};
use crate::tensor::{CosineMatrix, Matrix};

/// Clamp applied to the normalized LCS length before taking logs.
pub const LCS_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadActivations {
    pub mu: Activation,
    pub g: Activation,
    pub h: Activation,
}

impl Default for HeadActivations {
    fn default() -> Self {
        Self {
            mu: Activation::Identity,
            g: Activation::NegHalfShift,
            h: Activation::NegHalfShift,
        }
    }
}

/// The three fully-connected heads `f_μ`, `f_g`, `f_h`. With `h = None` the
/// delete head shares `f_g`'s parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualHeads {
    pub mu: Linear,
    pub g: Linear,
    pub h: Option<Linear>,
    pub act: HeadActivations,
}

impl ResidualHeads {
    pub fn init(
        store: &mut ParamStore,
        embed_dim: usize,
        projection_dim: usize,
        share_h: bool,
        act: HeadActivations,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mu = Linear::init(store, "head_mu", embed_dim, projection_dim, rng)?;
        let g = Linear::init(store, "head_g", embed_dim, projection_dim, rng)?;
        let h = if share_h {
            None
        } else {
            Some(Linear::init(store, "head_h", embed_dim, projection_dim, rng)?)
        };
        Ok(Self { mu, g, h, act })
    }

    pub fn from_store(store: &ParamStore, act: HeadActivations) -> Result<Self> {
        let h = if store.id("head_h.weight").is_some() {
            Some(Linear::from_store(store, "head_h")?)
        } else {
            None
        };
        Ok(Self {
            mu: Linear::from_store(store, "head_mu")?,
            g: Linear::from_store(store, "head_g")?,
            h,
            act,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.mu.in_dim
    }

    pub fn projection_dim(&self) -> usize {
        self.mu.out_dim
    }

    pub fn shares_h(&self) -> bool {
        self.h.is_none()
    }
}

struct HeadCache {
    cos: CosineMatrix,
}

fn project_pair(layer: &Linear, store: &ParamStore, u: &Matrix, v: &Matrix) -> Result<HeadCache> {
    let pu = layer.forward(store, u)?;
    let pv = layer.forward(store, v)?;
    Ok(HeadCache {
        cos: CosineMatrix::new(&pu, &pv)?,
    })
}

/// Forward state of [`residuals`] needed by [`residuals_backward`].
pub struct ResidualCache {
    u: Matrix,
    v: Matrix,
    mu: HeadCache,
    g: HeadCache,
    h: Option<HeadCache>,
}

pub fn residuals_with_cache(
    heads: &ResidualHeads,
    store: &ParamStore,
    u: &Matrix,
    v: &Matrix,
) -> Result<(FsdInputs, ResidualCache)> {
    if u.rows() == 0 || v.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if u.cols() != heads.input_dim() || v.cols() != heads.input_dim() {
        return Err(Error::dims(format!(
            "heads expect {}-dim snippets, got {} and {}",
            heads.input_dim(),
            u.cols(),
            v.cols()
        )));
    }
    let mu = project_pair(&heads.mu, store, u, v)?;
    let g = project_pair(&heads.g, store, u, v)?;
    let h = heads
        .h
        .as_ref()
        .map(|layer| project_pair(layer, store, u, v))
        .transpose()?;
    let h_cos = h.as_ref().unwrap_or(&g);
    let inputs = FsdInputs {
        mu: mu.cos.sim.map(|c| heads.act.mu.apply(c)),
        g: g.cos.sim.map(|c| heads.act.g.apply(c)),
        h: h_cos.cos.sim.map(|c| heads.act.h.apply(c)),
    };
    Ok((
        inputs,
        ResidualCache {
            u: u.clone(),
            v: v.clone(),
            mu,
            g,
            h,
        },
    ))
}

/// Match/insert/delete residuals between the snippets of `u` and `v`.
pub fn residuals(heads: &ResidualHeads, store: &ParamStore, u: &Matrix, v: &Matrix) -> Result<FsdInputs> {
    residuals_with_cache(heads, store, u, v).map(|(r, _)| r)
}

fn scaled_by_derivative(d: &Matrix, cos: &Matrix, act: Activation) -> Matrix {
    let mut out = d.clone();
    for (o, &c) in out.as_mut_slice().iter_mut().zip(cos.as_slice()) {
        *o *= act.derivative(c);
    }
    out
}

fn head_backward(
    layer: &Linear,
    store: &ParamStore,
    cache: &ResidualCache,
    head: &HeadCache,
    d_cos: &Matrix,
    grads: &mut Gradients,
) -> (Matrix, Matrix) {
    let (d_pu, d_pv) = head.cos.backward(d_cos);
    let du = layer.backward(store, &cache.u, &d_pu, grads);
    let dv = layer.backward(store, &cache.v, &d_pv, grads);
    (du, dv)
}

/// Pulls residual gradients back to head parameters (accumulated into
/// `grads`) and returns the gradients for `u` and `v`.
pub fn residuals_backward(
    heads: &ResidualHeads,
    store: &ParamStore,
    cache: &ResidualCache,
    d: &FsdInputs,
    grads: &mut Gradients,
) -> (Matrix, Matrix) {
    let act = heads.act;
    let d_mu = scaled_by_derivative(&d.mu, &cache.mu.cos.sim, act.mu);
    let (mut du, mut dv) = head_backward(&heads.mu, store, cache, &cache.mu, &d_mu, grads);

    let mut d_g = scaled_by_derivative(&d.g, &cache.g.cos.sim, act.g);
    match (&heads.h, &cache.h) {
        (Some(layer), Some(hc)) => {
            let d_h = scaled_by_derivative(&d.h, &hc.cos.sim, act.h);
            let (a, b) = head_backward(layer, store, cache, hc, &d_h, grads);
            du.add_assign(&a);
            dv.add_assign(&b);
        }
        _ => d_g.add_assign(&scaled_by_derivative(&d.h, &cache.g.cos.sim, act.h)),
    }
    let (a, b) = head_backward(&heads.g, store, cache, &cache.g, &d_g, grads);
    du.add_assign(&a);
    dv.add_assign(&b);
    (du, dv)
}

/// FSD score `S(M, N)` between two snippet sequences.
pub fn fsd_score(heads: &ResidualHeads, store: &ParamStore, u: &Matrix, v: &Matrix, mode: SmoothMaxMode) -> Result<f64> {
    Ok(fsd_forward(&residuals(heads, store, u, v)?, mode)?.score)
}

/// Hinge ranking loss `max(0, x + margin)`.
pub fn ranking_hinge(x: f64, margin: f64) -> f64 {
    (x + margin).max(0.0)
}

/// `ℓ(s[UV′] − s[UV]) + ℓ(s[U′V] − s[UV])`.
pub fn fsd_ranking_loss(s_uv: f64, s_u_vbg: f64, s_ubg_v: f64, margin: f64) -> f64 {
    ranking_hinge(s_u_vbg - s_uv, margin) + ranking_hinge(s_ubg_v - s_uv, margin)
}

/// Two same-class action proposals and their videos' background proposals.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalPairBatch {
    pub u: Matrix,
    pub v: Matrix,
    pub u_bg: Matrix,
    pub v_bg: Matrix,
    pub class_id: usize,
}

#[derive(Clone, Debug)]
pub struct FsdLossOutput {
    pub loss: f64,
    pub s_uv: f64,
    pub s_u_vbg: f64,
    pub s_ubg_v: f64,
    pub d_u: Matrix,
    pub d_v: Matrix,
    pub d_u_bg: Matrix,
    pub d_v_bg: Matrix,
}

struct ScoredPair {
    score: f64,
    cache: ResidualCache,
    fsd: crate::dp_kernels::FsdResult,
}

fn scored(heads: &ResidualHeads, store: &ParamStore, a: &Matrix, b: &Matrix, mode: SmoothMaxMode) -> Result<ScoredPair> {
    let (inputs, cache) = residuals_with_cache(heads, store, a, b)?;
    let fsd = fsd_forward(&inputs, mode)?;
    Ok(ScoredPair {
        score: fsd.score,
        cache,
        fsd,
    })
}

fn pair_backward(
    heads: &ResidualHeads,
    store: &ParamStore,
    pair: &ScoredPair,
    upstream: f64,
    grads: &mut Gradients,
) -> Result<(Matrix, Matrix)> {
    let d = fsd_backward(&pair.fsd, upstream)?;
    Ok(residuals_backward(heads, store, &pair.cache, &d, grads))
}

/// FSD contrasting loss for one proposal batch. Head gradients are added to
/// `grads`, scaled by `weight`; feature gradients are returned with the
/// same scaling.
pub fn fsd_loss(
    heads: &ResidualHeads,
    store: &ParamStore,
    batch: &ProposalPairBatch,
    mode: SmoothMaxMode,
    margin: f64,
    weight: f64,
    grads: &mut Gradients,
) -> Result<FsdLossOutput> {
    if batch.u_bg.rows() == 0 || batch.v_bg.rows() == 0 {
        return Err(Error::DegenerateBackground);
    }
    let uv = scored(heads, store, &batch.u, &batch.v, mode)?;
    let u_vbg = scored(heads, store, &batch.u, &batch.v_bg, mode)?;
    let ubg_v = scored(heads, store, &batch.u_bg, &batch.v, mode)?;
    let loss = fsd_ranking_loss(uv.score, u_vbg.score, ubg_v.score, margin);

    let active_1 = u_vbg.score - uv.score + margin > 0.0;
    let active_2 = ubg_v.score - uv.score + margin > 0.0;
    let mut d_u = Matrix::zeros(batch.u.rows(), batch.u.cols());
    let mut d_v = Matrix::zeros(batch.v.rows(), batch.v.cols());
    let mut d_u_bg = Matrix::zeros(batch.u_bg.rows(), batch.u_bg.cols());
    let mut d_v_bg = Matrix::zeros(batch.v_bg.rows(), batch.v_bg.cols());

    let n_active = active_1 as u8 as f64 + active_2 as u8 as f64;
    if weight != 0.0 && n_active > 0.0 {
        let (a, b) = pair_backward(heads, store, &uv, -weight * n_active, grads)?;
        d_u.add_assign(&a);
        d_v.add_assign(&b);
        if active_1 {
            let (a, b) = pair_backward(heads, store, &u_vbg, weight, grads)?;
            d_u.add_assign(&a);
            d_v_bg.add_assign(&b);
        }
        if active_2 {
            let (a, b) = pair_backward(heads, store, &ubg_v, weight, grads)?;
            d_u_bg.add_assign(&a);
            d_v.add_assign(&b);
        }
    }
    Ok(FsdLossOutput {
        loss,
        s_uv: uv.score,
        s_u_vbg: u_vbg.score,
        s_ubg_v: ubg_v.score,
        d_u,
        d_v,
        d_u_bg,
        d_v_bg,
    })
}

/// Top-J snippet selections from two videos and whether the videos share a
/// class.
#[derive(Clone, Debug, PartialEq)]
pub struct LcsPair {
    pub x_sel: Matrix,
    pub z_sel: Matrix,
    pub delta: bool,
}

#[derive(Clone, Debug)]
pub struct LcsLossOutput {
    pub loss: f64,
    pub length: f64,
    pub r_hat: f64,
    pub d_x: Matrix,
    pub d_z: Matrix,
}

/// Pairwise cosine similarities `c(i,j) = cos(x_i, z_j)`.
pub fn similarity_matrix(x: &Matrix, z: &Matrix) -> Result<Matrix> {
    Ok(CosineMatrix::new(x, z)?.sim)
}

/// Binary cross-entropy `−[δ log r̂ + (1−δ) log(1−r̂)]`.
pub fn lcs_bce(r_hat: f64, delta: bool) -> f64 {
    if delta {
        -r_hat.ln()
    } else {
        -(1.0 - r_hat).ln()
    }
}

/// LCS constraint: the soft LCS length normalized by the shorter selection
/// is pushed towards 1 for pairs sharing a class and towards 0 otherwise.
pub fn lcs_loss(pair: &LcsPair, tau: f64, weight: f64) -> Result<LcsLossOutput> {
    let (tx, tz) = (pair.x_sel.rows(), pair.z_sel.rows());
    if tx == 0 || tz == 0 {
        return Err(Error::EmptyInput);
    }
    let cos = CosineMatrix::new(&pair.x_sel, &pair.z_sel)?;
    let lcs = lcs_forward(&LcsInputs::new(cos.sim.clone(), tau)?)?;
    let denom = tx.min(tz) as f64;
    let raw = lcs.length / denom;
    let r_hat = raw.clamp(LCS_EPS, 1.0 - LCS_EPS);
    let loss = lcs_bce(r_hat, pair.delta);

    let clamped = raw != r_hat;
    let d_r_hat = if pair.delta { -1.0 / r_hat } else { 1.0 / (1.0 - r_hat) };
    let upstream = if clamped { 0.0 } else { weight * d_r_hat / denom };
    let (d_x, d_z) = if upstream == 0.0 {
        (
            Matrix::zeros(tx, pair.x_sel.cols()),
            Matrix::zeros(tz, pair.z_sel.cols()),
        )
    } else {
        cos.backward(&lcs_backward(&lcs, upstream))
    };
    Ok(LcsLossOutput {
        loss,
        length: lcs.length,
        r_hat,
        d_x,
        d_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff_optim::{check_gradients, GradCheckConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn heads(seed: u64, d: usize, p: usize, share: bool) -> (ParamStore, ResidualHeads) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let h = ResidualHeads::init(&mut store, d, p, share, HeadActivations::default(), &mut rng).unwrap();
        (store, h)
    }

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn residual_examples() {
        let (mut store, h) = heads(0, 2, 2, true);
        for layer in [h.mu, h.g] {
            store
                .value_mut(layer.weight)
                .copy_from_slice(Matrix::identity(2).as_slice());
            store.value_mut(layer.bias).iter_mut().for_each(|b| *b = 0.0);
        }
        let u = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let v = Matrix::from_rows(&[[1.0, 0.0], [0.0, 3.0]]).unwrap();
        let r = residuals(&h, &store, &u, &v).unwrap();
        assert_eq!(r.mu[(0, 0)], 1.0);
        assert_eq!(r.g[(0, 0)], -1.0);
        assert_eq!(r.mu[(0, 1)], 0.0);
        assert_eq!(r.g[(0, 1)], -0.5);
        assert!(matches!(
            residuals(&h, &store, &Matrix::zeros(1, 3), &v),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn shared_delete_head_equals_insert_residuals() {
        let (store, h) = heads(3, 4, 6, true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (u, v) = (random_matrix(&mut rng, 3, 4), random_matrix(&mut rng, 5, 4));
        let r = residuals(&h, &store, &u, &v).unwrap();
        assert_eq!(r.g, r.h);
    }

    #[test]
    fn ranking_loss_examples() {
        assert_eq!(fsd_ranking_loss(3.0, 2.0, 2.5, 0.5), 0.0);
        assert_eq!(fsd_ranking_loss(1.0, 1.0, 1.0, 0.0), 0.0);
        assert_eq!(fsd_ranking_loss(1.0, 2.0, 0.0, 0.5), 1.5);
    }

    #[test]
    fn lcs_bce_examples() {
        assert!((lcs_bce(0.9, true) - 0.105_360_515_657_826_3).abs() < 1e-15);
        assert!(lcs_bce(LCS_EPS, false) < 1.1e-7);
    }

    #[test]
    fn lcs_loss_perfect_pairs_cost_nothing() {
        let id = Matrix::identity(2);
        let pos = lcs_loss(&LcsPair { x_sel: id.clone(), z_sel: id.clone(), delta: true }, 0.92, 1.0).unwrap();
        assert_eq!(pos.length, 2.0);
        assert!(pos.loss < 1.1e-7 && pos.loss >= 0.0);
        let swapped = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let far = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let neg = lcs_loss(
            &LcsPair {
                x_sel: far.map(|x| x * 2.0 - 1.0),
                z_sel: swapped.map(|x| -x),
                delta: false,
            },
            0.92,
            1.0,
        )
        .unwrap();
        assert_eq!(neg.length, 0.0);
        assert!(neg.loss < 1.1e-7);
        assert!(lcs_loss(&LcsPair { x_sel: Matrix::zeros(0, 2), z_sel: id, delta: true }, 0.92, 1.0).is_err());
    }

    #[test]
    fn fsd_loss_rejects_empty_proposals() {
        let (store, h) = heads(1, 3, 4, true);
        let mut grads = Gradients::zeros_for(&store);
        let batch = ProposalPairBatch {
            u: Matrix::zeros(0, 3),
            v: Matrix::filled(2, 3, 1.0),
            u_bg: Matrix::filled(2, 3, 1.0),
            v_bg: Matrix::filled(2, 3, 1.0),
            class_id: 0,
        };
        assert!(fsd_loss(&h, &store, &batch, SmoothMaxMode::default(), 0.5, 1.0, &mut grads).is_err());
    }

    fn random_batch(rng: &mut impl Rng, d: usize) -> ProposalPairBatch {
        ProposalPairBatch {
            u: random_matrix(rng, 3, d),
            v: random_matrix(rng, 4, d),
            u_bg: random_matrix(rng, 2, d),
            v_bg: random_matrix(rng, 3, d),
            class_id: 0,
        }
    }

    #[test]
    fn fsd_loss_head_gradients_match_finite_differences() {
        for share in [true, false] {
            let (mut store, h) = heads(21, 4, 5, share);
            let mut rng = ChaCha8Rng::seed_from_u64(22);
            let batch = random_batch(&mut rng, 4);
            // large margin keeps both hinges active
            let margin = 5.0;
            let mode = SmoothMaxMode::normalized(10.0).unwrap();
            let report = check_gradients(
                |st, g| Ok(fsd_loss(&h, st, &batch, mode, margin, 1.0, g)?.loss),
                &mut store,
                &GradCheckConfig::default(),
            )
            .unwrap();
            assert!(report.passed(), "share={share}: {report:?}");
        }
    }

    #[test]
    fn fsd_loss_feature_gradients_match_finite_differences() {
        let (store, h) = heads(31, 3, 4, true);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let batch = random_batch(&mut rng, 3);
        let mode = SmoothMaxMode::normalized(10.0).unwrap();
        let mut g = Gradients::zeros_for(&store);
        let out = fsd_loss(&h, &store, &batch, mode, 5.0, 1.0, &mut g).unwrap();
        let eps = 1e-5;
        for which in 0..4 {
            let grad = [&out.d_u, &out.d_v, &out.d_u_bg, &out.d_v_bg][which];
            for k in 0..grad.as_slice().len() {
                let eval = |delta: f64| {
                    let mut b = batch.clone();
                    [&mut b.u, &mut b.v, &mut b.u_bg, &mut b.v_bg][which].as_mut_slice()[k] += delta;
                    let mut g = Gradients::zeros_for(&store);
                    fsd_loss(&h, &store, &b, mode, 5.0, 1.0, &mut g).unwrap().loss
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = grad.as_slice()[k];
                assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-5), "{which}/{k}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn lcs_loss_feature_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let base = random_matrix(&mut rng, 4, 3);
        // z shares two rows with x up to small noise so some cells match
        let mut z = random_matrix(&mut rng, 5, 3);
        for (dst, src) in [(1, 0), (3, 2)] {
            let row: Vec<f64> = base.row(src).iter().map(|v| v + rng.random_range(-0.05..0.05)).collect();
            z.row_mut(dst).copy_from_slice(&row);
        }
        for delta in [true, false] {
            let pair = LcsPair { x_sel: base.clone(), z_sel: z.clone(), delta };
            let out = lcs_loss(&pair, 0.92, 1.0).unwrap();
            assert!(out.length > 0.0);
            let sim = similarity_matrix(&base, &z).unwrap();
            assert!(sim.as_slice().iter().all(|c| (c - 0.92).abs() > 1e-3));
            let eps = 1e-5;
            for k in 0..12 {
                let eval = |d: f64| {
                    let mut p = pair.clone();
                    p.x_sel.as_mut_slice()[k] += d;
                    lcs_loss(&p, 0.92, 1.0).unwrap().loss
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = out.d_x.as_slice()[k];
                assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-5), "{k}: {fd} vs {an}");
            }
        }
    }

    proptest! {
        #[test]
        fn cosine_matrices_are_transposes(seed in any::<u64>(), tx in 1usize..6, tz in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, z) = (random_matrix(&mut rng, tx, 4), random_matrix(&mut rng, tz, 4));
            let a = similarity_matrix(&x, &z).unwrap();
            let b = similarity_matrix(&z, &x).unwrap().transpose();
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        }

        #[test]
        fn losses_are_non_negative_and_scale_invariant(
            seed in any::<u64>(), scale in 0.01f64..100.0, delta in any::<bool>(), tau in 0.0f64..1.0,
        ) {
            let (store, h) = heads(seed, 3, 4, true);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let batch = random_batch(&mut rng, 3);
            let mode = SmoothMaxMode::normalized(10.0).unwrap();
            let mut g = Gradients::zeros_for(&store);
            let a = fsd_loss(&h, &store, &batch, mode, 0.5, 1.0, &mut g).unwrap();
            prop_assert!(a.loss >= 0.0);
            // zero head biases make projections positively homogeneous, so
            // cosine residuals ignore snippet scale
            let mut unbiased = store.clone();
            for layer in [h.mu, h.g] {
                unbiased.value_mut(layer.bias).iter_mut().for_each(|b| *b = 0.0);
            }
            let mut scaled = batch.clone();
            scaled.u.row_mut(0).iter_mut().for_each(|x| *x *= scale);
            scaled.v_bg.scale(scale);
            let mut g = Gradients::zeros_for(&store);
            let b1 = fsd_loss(&h, &unbiased, &batch, mode, 0.5, 1.0, &mut g).unwrap();
            let b2 = fsd_loss(&h, &unbiased, &scaled, mode, 0.5, 1.0, &mut g).unwrap();
            prop_assert!((b1.loss - b2.loss).abs() <= 1e-9);
            let r1 = residuals(&h, &unbiased, &batch.u, &batch.v).unwrap();
            let r2 = residuals(&h, &unbiased, &scaled.u, &scaled.v).unwrap();
            prop_assert!(r1.mu.max_abs_diff(&r2.mu) <= 1e-9 && r1.g.max_abs_diff(&r2.g) <= 1e-9);

            let pair = LcsPair { x_sel: batch.u.clone(), z_sel: batch.v.clone(), delta };
            let l1 = lcs_loss(&pair, tau, 1.0).unwrap();
            prop_assert!(l1.loss >= 0.0);
            let mut sp = pair.clone();
            sp.x_sel.row_mut(1).iter_mut().for_each(|x| *x *= scale);
            sp.z_sel.scale(scale);
            let l2 = lcs_loss(&sp, tau, 1.0).unwrap();
            prop_assert!((l1.loss - l2.loss).abs() <= 1e-9);
        }
    }
}
