//! Localization-by-classification backbone.
//!
//! Raw snippet features pass through an affine+ReLU embedding; an attention
//! head `α_t = sigmoid(f_α(x_t))` pools the embedded snippets into
//! `x̄ = Σ α_t x_t`, and the classifier gives `ỹ = softmax(f_cls(x̄))`.
//! The class activation sequence is `CAS(t, c) = α_t · softmax(f_cls(x_t))_c`.

use rand::Rng;

use crate::autodiff_optim::{Gradients, ParamStore};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::tensor::{dot, sigmoid, softmax, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub embed: Vec<Linear>,
    pub attn: Linear,
    pub cls: Linear,
}

impl BackboneParams {
    pub fn init(
        store: &mut ParamStore,
        input_dim: usize,
        embed_dim: usize,
        n_classes: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidConfig("embedding depth must be at least 1".into()));
        }
        let mut embed = Vec::with_capacity(depth);
        let mut d = input_dim;
        for l in 0..depth {
            embed.push(Linear::init(store, &format!("embed.{l}"), d, embed_dim, rng)?);
            d = embed_dim;
        }
        let attn = Linear::init(store, "attn", embed_dim, 1, rng)?;
        let cls = Linear::init(store, "cls", embed_dim, n_classes, rng)?;
        Ok(Self { embed, attn, cls })
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let mut embed = Vec::new();
        while store.id(&format!("embed.{}.weight", embed.len())).is_some() {
            embed.push(Linear::from_store(store, &format!("embed.{}", embed.len()))?);
        }
        if embed.is_empty() {
            return Err(Error::UnknownParameter("embed.0.weight".into()));
        }
        let params = Self {
            embed,
            attn: Linear::from_store(store, "attn")?,
            cls: Linear::from_store(store, "cls")?,
        };
        let d = params.embed_dim();
        if params.embed.windows(2).any(|w| w[0].out_dim != w[1].in_dim)
            || params.attn.in_dim != d
            || params.attn.out_dim != 1
            || params.cls.in_dim != d
        {
            return Err(Error::dims("inconsistent backbone layer shapes"));
        }
        Ok(params)
    }

    pub fn input_dim(&self) -> usize {
        self.embed[0].in_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.last().expect("non-empty").out_dim
    }

    pub fn n_classes(&self) -> usize {
        self.cls.out_dim
    }
}

/// Layer inputs and pre-activations of the embedding, kept for backward.
#[derive(Clone, Debug)]
pub struct EmbedCache {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
}

pub fn embed_with_cache(raw: &Matrix, params: &BackboneParams, store: &ParamStore) -> Result<(Matrix, EmbedCache)> {
    if raw.cols() != params.input_dim() {
        return Err(Error::dims(format!(
            "features have {} dims, backbone expects {}",
            raw.cols(),
            params.input_dim()
        )));
    }
    let mut inputs = Vec::with_capacity(params.embed.len());
    let mut pre = Vec::with_capacity(params.embed.len());
    let mut x = raw.clone();
    for layer in &params.embed {
        let z = layer.forward(store, &x)?;
        let next = z.map(|v| if v < 0.0 { 0.0 } else { v });
        inputs.push(x);
        pre.push(z);
        x = next;
    }
    Ok((x, EmbedCache { inputs, pre }))
}

/// Per-snippet affine map followed by ReLU, once per embedding layer.
pub fn embed(raw: &Matrix, params: &BackboneParams, store: &ParamStore) -> Result<Matrix> {
    embed_with_cache(raw, params, store).map(|(x, _)| x)
}

/// Backpropagates through the embedding layers, accumulating parameter
/// gradients, and returns the gradient w.r.t. the raw features.
pub fn embed_backward(
    params: &BackboneParams,
    store: &ParamStore,
    cache: &EmbedCache,
    d_out: &Matrix,
    grads: &mut Gradients,
) -> Matrix {
    let mut d = d_out.clone();
    for (l, layer) in params.embed.iter().enumerate().rev() {
        let z = &cache.pre[l];
        for (dv, &zv) in d.as_mut_slice().iter_mut().zip(z.as_slice()) {
            if zv <= 0.0 {
                *dv = 0.0;
            }
        }
        d = layer.backward(store, &cache.inputs[l], &d, grads);
    }
    d
}

/// Attention weights `α_t = sigmoid(f_α(x_t))`.
pub fn attention(x: &Matrix, params: &BackboneParams, store: &ParamStore) -> Result<Vec<f64>> {
    let a = params.attn.forward(store, x)?;
    Ok(a.as_slice().iter().map(|&v| sigmoid(v)).collect())
}

/// `Σ_t α_t x_t`.
pub fn pool(x: &Matrix, alpha: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.cols()];
    for (t, &a) in alpha.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(x.row(t)) {
            *o += a * v;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoScore {
    pub pooled: Vec<f64>,
    pub probs: Vec<f64>,
    pub alpha: Vec<f64>,
}

pub fn classify_pooled(pooled: &[f64], params: &BackboneParams, store: &ParamStore) -> Result<Vec<f64>> {
    let m = Matrix::from_vec(1, pooled.len(), pooled.to_vec())?;
    Ok(softmax(params.cls.forward(store, &m)?.as_slice()))
}

/// Video-level prediction from embedded snippets.
pub fn video_score(x: &Matrix, params: &BackboneParams, store: &ParamStore) -> Result<VideoScore> {
    if x.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    let alpha = attention(x, params, store)?;
    let pooled = pool(x, &alpha);
    let probs = classify_pooled(&pooled, params, store)?;
    Ok(VideoScore { pooled, probs, alpha })
}

fn normalized_labels(labels: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = labels.iter().sum();
    if !(total > 0.0) {
        return Err(Error::UnlabeledVideo);
    }
    Ok(labels.iter().map(|y| y / total).collect())
}

/// `−Σ ŷ_i log ỹ_i` with `ŷ = y / Σy`.
pub fn cls_loss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::dims(format!(
            "{} class probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let target = normalized_labels(labels)?;
    Ok(target
        .iter()
        .zip(probs)
        .filter(|(y, _)| **y > 0.0)
        .map(|(y, p)| -y * if p.is_nan() { *p } else { p.max(f64::MIN_POSITIVE) }.ln())
        .sum())
}

/// Backward of `upstream · cls_loss(video_score(x))`; accumulates parameter
/// gradients and returns `dL/dx`.
pub fn video_cls_backward(
    x: &Matrix,
    score: &VideoScore,
    labels: &[f64],
    upstream: f64,
    params: &BackboneParams,
    store: &ParamStore,
    grads: &mut Gradients,
) -> Result<Matrix> {
    let target = normalized_labels(labels)?;
    let d_logits: Vec<f64> = score
        .probs
        .iter()
        .zip(&target)
        .map(|(p, y)| upstream * (p - y))
        .collect();
    let pooled = Matrix::from_vec(1, score.pooled.len(), score.pooled.clone())?;
    let d_logits = Matrix::from_vec(1, d_logits.len(), d_logits)?;
    let d_pooled = params.cls.backward(store, &pooled, &d_logits, grads);
    let d_pooled = d_pooled.row(0);

    let t = x.rows();
    let mut dx = Matrix::zeros(t, x.cols());
    let mut d_attn = Matrix::zeros(t, 1);
    for (i, &a) in score.alpha.iter().enumerate() {
        for (d, g) in dx.row_mut(i).iter_mut().zip(d_pooled) {
            *d += a * g;
        }
        let d_alpha = dot(d_pooled, x.row(i));
        d_attn[(i, 0)] = d_alpha * a * (1.0 - a);
    }
    let dx_attn = params.attn.backward(store, x, &d_attn, grads);
    dx.add_assign(&dx_attn);
    Ok(dx)
}

/// Class activation sequence, `T × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Cas {
    pub matrix: Matrix,
    pub alpha: Vec<f64>,
}

impl Cas {
    /// Gates per-snippet class probabilities (rows of `probs`) by `alpha`.
    pub fn from_parts(alpha: Vec<f64>, probs: &Matrix) -> Self {
        let mut matrix = probs.clone();
        for (t, &a) in alpha.iter().enumerate() {
            matrix.row_mut(t).iter_mut().for_each(|p| *p *= a);
        }
        Self { matrix, alpha }
    }

    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.matrix.cols()
    }
}

pub fn cas(x: &Matrix, params: &BackboneParams, store: &ParamStore) -> Result<Cas> {
    let alpha = attention(x, params, store)?;
    let logits = params.cls.forward(store, x)?;
    let mut probs = Matrix::zeros(x.rows(), params.n_classes());
    for t in 0..x.rows() {
        probs.row_mut(t).copy_from_slice(&softmax(logits.row(t)));
    }
    Ok(Cas::from_parts(alpha, &probs))
}
