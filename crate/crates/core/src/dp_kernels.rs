//! Differentiable dynamic-programming kernels.
//!
//! * [`smooth_max`] / [`smooth_max_grad`]: log-sum-exp relaxation of `max`.
//! * [`fsd_forward`] / [`fsd_backward`]: the match/insert/delete similarity
//!   recursion
//!   `S(i,j) = μ(i,j) + smax(S(i-1,j-1), g(i,j) + S(i-1,j), h(i,j) + S(i,j-1))`
//!   with `S(0,·) = S(·,0) = 0`.
//! * [`lcs_forward`] / [`lcs_backward`]: thresholded soft longest common
//!   subsequence, `R(i,j) = R(i-1,j-1) + c(i,j)` when `c(i,j) ≥ τ`, otherwise
//!   `max(R(i-1,j), R(i,j-1))`.
//!
//! Tables are filled in row-major order and the backward passes sweep the
//! exact reverse. Ties go to the first listed branch (match, insert, delete
//! for FSD; `R(i-1,j)` over `R(i,j-1)` for LCS).

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Flavour of the max operator used inside the FSD recursion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SmoothMaxMode {
    /// `(1/γ) log Σ exp(γ vᵢ)`; converges to `max` as `γ → ∞`.
    Normalized { gamma: f64 },
    /// `log Σ exp(γ vᵢ)` without the `1/γ` factor.
    Unnormalized { gamma: f64 },
    /// Plain `max` with lowest-index subgradient.
    Hard,
}

impl Default for SmoothMaxMode {
    fn default() -> Self {
        SmoothMaxMode::Normalized { gamma: 10.0 }
    }
}

impl SmoothMaxMode {
    pub fn normalized(gamma: f64) -> Result<Self> {
        let m = SmoothMaxMode::Normalized { gamma };
        m.validate()?;
        Ok(m)
    }

    pub fn unnormalized(gamma: f64) -> Result<Self> {
        let m = SmoothMaxMode::Unnormalized { gamma };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SmoothMaxMode::Normalized { gamma } | SmoothMaxMode::Unnormalized { gamma }
                if !(gamma > 0.0 && gamma.is_finite()) =>
            {
                Err(Error::InvalidConfig(format!(
                    "gamma must be positive and finite, got {gamma}"
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn is_smooth(&self) -> bool {
        !matches!(self, SmoothMaxMode::Hard)
    }

    /// Factor between the per-branch softmax weights and the true partial
    /// derivatives: `γ` for the unnormalized form, 1 otherwise.
    fn grad_scale(&self) -> f64 {
        match *self {
            SmoothMaxMode::Unnormalized { gamma } => gamma,
            _ => 1.0,
        }
    }
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(())
}

/// Value of the max operator plus the categorical branch weights
/// (softmax(γv) in smooth modes, one-hot at the first maximizer in hard mode).
fn smooth_max_with_weights(values: &[f64], mode: SmoothMaxMode, weights: &mut [f64]) -> f64 {
    let (arg, m) = values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        });
    match mode {
        SmoothMaxMode::Hard => {
            weights.iter_mut().for_each(|w| *w = 0.0);
            weights[arg] = 1.0;
            m
        }
        SmoothMaxMode::Normalized { gamma } | SmoothMaxMode::Unnormalized { gamma } => {
            // z = 1 + rest, with the maximizer contributing exactly 1
            let mut rest = 0.0;
            for (i, (w, &v)) in weights.iter_mut().zip(values).enumerate() {
                *w = if i == arg { 1.0 } else { (gamma * (v - m)).exp() };
                if i != arg {
                    rest += *w;
                }
            }
            let z = 1.0 + rest;
            weights.iter_mut().for_each(|w| *w /= z);
            match mode {
                SmoothMaxMode::Normalized { .. } => m + rest.ln_1p() / gamma,
                _ => gamma * m + rest.ln_1p(),
            }
        }
    }
}

/// Max operator selected by `mode`, evaluated with max-subtraction.
pub fn smooth_max(values: &[f64], mode: SmoothMaxMode) -> Result<f64> {
    check_values(values)?;
    mode.validate()?;
    let mut w = vec![0.0; values.len()];
    Ok(smooth_max_with_weights(values, mode, &mut w))
}

/// Gradient of [`smooth_max`] with respect to `values`.
///
/// Normalized mode gives `softmax(γv)`; the unnormalized form gives
/// `γ·softmax(γv)`; hard mode gives a one-hot at the lowest-index maximizer.
pub fn smooth_max_grad(values: &[f64], mode: SmoothMaxMode) -> Result<Vec<f64>> {
    check_values(values)?;
    mode.validate()?;
    let mut w = vec![0.0; values.len()];
    smooth_max_with_weights(values, mode, &mut w);
    let s = mode.grad_scale();
    if s != 1.0 {
        w.iter_mut().for_each(|x| *x *= s);
    }
    Ok(w)
}

/// Per-cell residuals of the FSD recursion: match reward `mu`, insert
/// residual `g` and delete residual `h`, all `M × N`.
#[derive(Clone, Debug, PartialEq)]
pub struct FsdInputs {
    pub mu: Matrix,
    pub g: Matrix,
    pub h: Matrix,
}

impl FsdInputs {
    pub fn new(mu: Matrix, g: Matrix, h: Matrix) -> Result<Self> {
        let inputs = Self { mu, g, h };
        inputs.validate()?;
        Ok(inputs)
    }

    /// All three residual matrices filled with constants.
    pub fn constant(m: usize, n: usize, mu: f64, g: f64, h: f64) -> Self {
        Self {
            mu: Matrix::filled(m, n, mu),
            g: Matrix::filled(m, n, g),
            h: Matrix::filled(m, n, h),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mu.shape()
    }

    pub fn validate(&self) -> Result<()> {
        let (m, n) = self.mu.shape();
        if self.g.shape() != (m, n) || self.h.shape() != (m, n) {
            return Err(Error::dims(format!(
                "residual shapes mu {:?}, g {:?}, h {:?}",
                self.mu.shape(),
                self.g.shape(),
                self.h.shape()
            )));
        }
        if m == 0 || n == 0 {
            return Err(Error::EmptyInput);
        }
        if !(self.mu.all_finite() && self.g.all_finite() && self.h.all_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(())
    }
}

/// Branch index into the per-cell weight triple.
pub const MATCH: usize = 0;
pub const INSERT: usize = 1;
pub const DELETE: usize = 2;

#[derive(Clone, Debug)]
pub struct FsdResult {
    pub score: f64,
    /// `(M+1) × (N+1)` accumulator, zero on row 0 and column 0.
    pub table: Matrix,
    /// Soft (or one-hot) assignment of each interior cell to
    /// match/insert/delete, row-major over `M × N`. `None` when the forward
    /// pass was run without bookkeeping.
    pub branch_weights: Option<Vec<[f64; 3]>>,
    pub mode: SmoothMaxMode,
}

impl FsdResult {
    pub fn weights(&self, i: usize, j: usize) -> Option<[f64; 3]> {
        let n = self.table.cols() - 1;
        self.branch_weights.as_ref().map(|w| w[(i - 1) * n + (j - 1)])
    }
}

fn fsd_fill(
    inputs: &FsdInputs,
    mode: SmoothMaxMode,
    mut record: Option<&mut Vec<[f64; 3]>>,
) -> Result<Matrix> {
    inputs.validate()?;
    mode.validate()?;
    let (m, n) = inputs.shape();
    let mut s = Matrix::zeros(m + 1, n + 1);
    let mut w = [0.0; 3];
    for i in 1..=m {
        for j in 1..=n {
            let branches = [
                s[(i - 1, j - 1)],
                inputs.g[(i - 1, j - 1)] + s[(i - 1, j)],
                inputs.h[(i - 1, j - 1)] + s[(i, j - 1)],
            ];
            let best = smooth_max_with_weights(&branches, mode, &mut w);
            s[(i, j)] = inputs.mu[(i - 1, j - 1)] + best;
            if let Some(rec) = record.as_deref_mut() {
                rec.push(w);
            }
        }
    }
    Ok(s)
}

/// Runs the FSD recursion and records per-cell branch weights.
pub fn fsd_forward(inputs: &FsdInputs, mode: SmoothMaxMode) -> Result<FsdResult> {
    let (m, n) = inputs.shape();
    let mut weights = Vec::with_capacity(m * n);
    let table = fsd_fill(inputs, mode, Some(&mut weights))?;
    Ok(FsdResult {
        score: table[(m, n)],
        table,
        branch_weights: Some(weights),
        mode,
    })
}

/// Score only; the result cannot be passed to [`fsd_backward`].
pub fn fsd_forward_score_only(inputs: &FsdInputs, mode: SmoothMaxMode) -> Result<FsdResult> {
    let (m, n) = inputs.shape();
    let table = fsd_fill(inputs, mode, None)?;
    Ok(FsdResult {
        score: table[(m, n)],
        table,
        branch_weights: None,
        mode,
    })
}

/// Gradient of `upstream · score` with respect to `mu`, `g` and `h`.
pub fn fsd_backward(result: &FsdResult, upstream: f64) -> Result<FsdInputs> {
    let weights = result
        .branch_weights
        .as_ref()
        .ok_or(Error::MissingBookkeeping)?;
    let (rows, cols) = result.table.shape();
    let (m, n) = (rows - 1, cols - 1);
    if weights.len() != m * n {
        return Err(Error::MissingBookkeeping);
    }
    let scale = result.mode.grad_scale();
    let mut adj = Matrix::zeros(m + 1, n + 1);
    adj[(m, n)] = upstream;
    let mut grads = FsdInputs::constant(m, n, 0.0, 0.0, 0.0);
    for i in (1..=m).rev() {
        for j in (1..=n).rev() {
            let e = adj[(i, j)];
            if e == 0.0 {
                continue;
            }
            let w = weights[(i - 1) * n + (j - 1)];
            let (w_m, w_i, w_d) = (e * scale * w[MATCH], e * scale * w[INSERT], e * scale * w[DELETE]);
            grads.mu[(i - 1, j - 1)] = e;
            grads.g[(i - 1, j - 1)] = w_i;
            grads.h[(i - 1, j - 1)] = w_d;
            adj[(i - 1, j - 1)] += w_m;
            adj[(i - 1, j)] += w_i;
            adj[(i, j - 1)] += w_d;
        }
    }
    Ok(grads)
}

/// Similarity matrix and match threshold for the soft LCS recursion.
#[derive(Clone, Debug, PartialEq)]
pub struct LcsInputs {
    pub sim: Matrix,
    pub tau: f64,
}

impl LcsInputs {
    pub fn new(sim: Matrix, tau: f64) -> Result<Self> {
        let inputs = Self { sim, tau };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sim.rows() == 0 || self.sim.cols() == 0 {
            return Err(Error::EmptyInput);
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidConfig(format!(
                "tau must lie in [-1, 1], got {}",
                self.tau
            )));
        }
        for i in 0..self.sim.rows() {
            for (j, &c) in self.sim.row(i).iter().enumerate() {
                if !(-1.0..=1.0).contains(&c) {
                    return Err(Error::SimilarityOutOfRange {
                        row: i,
                        col: j,
                        value: c,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LcsResult {
    pub length: f64,
    /// `(Tx+1) × (Tz+1)`, zero on row 0 and column 0.
    pub table: Matrix,
    /// Row-major `Tx × Tz`, `true` where `c(i,j) ≥ τ`.
    pub match_mask: Vec<bool>,
    /// Matched cells on the traceback path, 1-based, ascending.
    pub path: Vec<(usize, usize)>,
}

impl LcsResult {
    pub fn is_match(&self, i: usize, j: usize) -> bool {
        let tz = self.table.cols() - 1;
        self.match_mask[(i - 1) * tz + (j - 1)]
    }
}

/// Fills the thresholded soft-LCS table and recovers the matched path.
pub fn lcs_forward(inputs: &LcsInputs) -> Result<LcsResult> {
    inputs.validate()?;
    let (tx, tz) = inputs.sim.shape();
    let mut r = Matrix::zeros(tx + 1, tz + 1);
    let mut mask = Vec::with_capacity(tx * tz);
    for i in 1..=tx {
        for j in 1..=tz {
            let c = inputs.sim[(i - 1, j - 1)];
            let matched = c >= inputs.tau;
            mask.push(matched);
            r[(i, j)] = if matched {
                r[(i - 1, j - 1)] + c
            } else {
                r[(i - 1, j)].max(r[(i, j - 1)])
            };
        }
    }

    let mut path = Vec::new();
    let (mut i, mut j) = (tx, tz);
    while i > 0 && j > 0 {
        if mask[(i - 1) * tz + (j - 1)] {
            path.push((i, j));
            i -= 1;
            j -= 1;
        } else if r[(i - 1, j)] >= r[(i, j - 1)] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    path.reverse();

    Ok(LcsResult {
        length: r[(tx, tz)],
        table: r,
        match_mask: mask,
        path,
    })
}

/// Subgradient of `upstream · length` with respect to the similarity matrix.
///
/// Each cell's value depends on exactly one predecessor, so the adjoint is
/// carried along the traceback path and lands on its matched cells.
pub fn lcs_backward(result: &LcsResult, upstream: f64) -> Matrix {
    let (rows, cols) = result.table.shape();
    let mut grad = Matrix::zeros(rows - 1, cols - 1);
    if upstream == 0.0 {
        return grad;
    }
    for &(i, j) in &result.path {
        grad[(i - 1, j - 1)] += upstream;
    }
    grad
}
