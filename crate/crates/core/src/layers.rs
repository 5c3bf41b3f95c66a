//! Fully-connected layers backed by a [`ParamStore`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff_optim::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Affine map `y = x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers `{prefix}.weight` and `{prefix}.bias`, drawn uniformly in
    /// `±1/√in_dim`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidConfig(format!("layer `{prefix}` needs non-zero dims")));
        }
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let b: Vec<f64> = (0..out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        let weight = store.add(format!("{prefix}.weight"), &[in_dim, out_dim], w)?;
        let bias = store.add(format!("{prefix}.bias"), &[out_dim], b)?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// Looks up an existing layer by prefix.
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let weight = store.require(&format!("{prefix}.weight"))?;
        let bias = store.require(&format!("{prefix}.bias"))?;
        let ws = &store.entry(weight).shape;
        let bs = &store.entry(bias).shape;
        if ws.len() != 2 || bs.len() != 1 || bs[0] != ws[1] {
            return Err(Error::dims(format!(
                "layer `{prefix}` has weight {ws:?} and bias {bs:?}"
            )));
        }
        Ok(Self {
            weight,
            bias,
            in_dim: ws[0],
            out_dim: ws[1],
        })
    }

    pub fn weight_matrix(&self, store: &ParamStore) -> Matrix {
        Matrix::from_vec(self.in_dim, self.out_dim, store.value(self.weight).to_vec())
            .expect("registered shape")
    }

    pub fn forward(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim {
            return Err(Error::dims(format!(
                "layer expects {} inputs, got {}",
                self.in_dim,
                x.cols()
            )));
        }
        let mut y = x.matmul(&self.weight_matrix(store));
        let b = store.value(self.bias);
        for i in 0..y.rows() {
            for (v, bj) in y.row_mut(i).iter_mut().zip(b) {
                *v += bj;
            }
        }
        Ok(y)
    }

    /// Accumulates `dW = xᵀ·dy`, `db = Σ dy` and returns `dx = dy·Wᵀ`.
    pub fn backward(&self, store: &ParamStore, x: &Matrix, dy: &Matrix, grads: &mut Gradients) -> Matrix {
        debug_assert_eq!(dy.cols(), self.out_dim);
        let dw = x.t_matmul(dy);
        for (g, d) in grads.get_mut(self.weight).iter_mut().zip(dw.as_slice()) {
            *g += d;
        }
        let db = grads.get_mut(self.bias);
        for i in 0..dy.rows() {
            for (g, d) in db.iter_mut().zip(dy.row(i)) {
                *g += d;
            }
        }
        dy.matmul_t(&self.weight_matrix(store))
    }
}

/// Scalar activation applied to a cosine value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    /// `x ↦ −(1 + x)/2`, a penalty in `[−1, 0]` for `x ∈ [−1, 1]`.
    NegHalfShift,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::NegHalfShift => -(1.0 + x) / 2.0,
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => crate::tensor::sigmoid(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::NegHalfShift => -0.5,
            Activation::Tanh => 1.0 - x.tanh().powi(2),
            Activation::Sigmoid => {
                let s = crate::tensor::sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let lin = Linear::init(&mut store, "fc", 3, 2, &mut rng).unwrap();
        let x = Matrix::from_rows(&[[0.5, -1.0, 2.0], [0.1, 0.2, -0.3]]).unwrap();
        let w_out = Matrix::from_rows(&[[1.0, -2.0], [0.5, 0.25]]).unwrap();
        let loss = |s: &ParamStore, x: &Matrix| -> f64 {
            crate::tensor::dot(lin.forward(s, x).unwrap().as_slice(), w_out.as_slice())
        };
        let mut grads = Gradients::zeros_for(&store);
        let dx = lin.backward(&store, &x, &w_out, &mut grads);
        for k in 0..6 {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.as_mut_slice()[k] += 1e-6;
            m.as_mut_slice()[k] -= 1e-6;
            let fd = (loss(&store, &p) - loss(&store, &m)) / 2e-6;
            assert!((fd - dx.as_slice()[k]).abs() < 1e-8);
        }
        for id in [lin.weight, lin.bias] {
            for k in 0..store.value(id).len() {
                let mut s = store.clone();
                s.value_mut(id)[k] += 1e-6;
                let up = loss(&s, &x);
                s.value_mut(id)[k] -= 2e-6;
                let fd = (up - loss(&s, &x)) / 2e-6;
                assert!((fd - grads.get(id)[k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for act in [
            Activation::Identity,
            Activation::NegHalfShift,
            Activation::Tanh,
            Activation::Sigmoid,
        ] {
            for x in [-0.9, -0.1, 0.0, 0.4, 1.0] {
                let fd = (act.apply(x + 1e-6) - act.apply(x - 1e-6)) / 2e-6;
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
        assert_eq!(Activation::NegHalfShift.apply(1.0), -1.0);
        assert_eq!(Activation::NegHalfShift.apply(-1.0), 0.0);
    }
}
