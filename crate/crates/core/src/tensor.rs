//! Dense row-major matrices and the cosine-similarity kernel shared by the
//! contrastive losses.

use crate::error::{Error, Result};

/// Row-major `rows × cols` matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(format!(
                "buffer of {} elements for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. All rows must share one length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dims(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    /// Rows `indices` gathered in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Adds row `k` of `src` into row `indices[k]` of `self`.
    pub fn scatter_add_rows(&mut self, indices: &[usize], src: &Matrix) {
        debug_assert_eq!(indices.len(), src.rows);
        debug_assert_eq!(self.cols, src.cols);
        for (k, &i) in indices.iter().enumerate() {
            for (d, s) in self.row_mut(i).iter_mut().zip(src.row(k)) {
                *d += s;
            }
        }
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(rhs.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        out
    }

    /// `selfᵀ · rhs`.
    pub fn t_matmul(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.rows, rhs.rows, "t_matmul inner dimension");
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = rhs.row(k);
            for (i, &aki) in a.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                let o = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (oj, &bkj) in o.iter_mut().zip(b) {
                    *oj += aki * bkj;
                }
            }
        }
        out
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.cols, "matmul_t inner dimension");
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cosine of two vectors. A zero-norm operand yields 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Row-normalized copies of two matrices and their pairwise cosine matrix,
/// kept for the backward pass.
#[derive(Clone, Debug)]
pub struct CosineMatrix {
    pub sim: Matrix,
    a_hat: Matrix,
    b_hat: Matrix,
    a_norm: Vec<f64>,
    b_norm: Vec<f64>,
}

fn normalize_rows(m: &Matrix) -> (Matrix, Vec<f64>) {
    let mut hat = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        norms.push(n);
        let r = hat.row_mut(i);
        if n > 0.0 {
            r.iter_mut().for_each(|x| *x /= n);
        } else {
            r.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    (hat, norms)
}

impl CosineMatrix {
    /// `sim[i][j] = cos(a_i, b_j)`, clamped to `[-1, 1]`.
    pub fn new(a: &Matrix, b: &Matrix) -> Result<Self> {
        if a.cols() != b.cols() {
            return Err(Error::dims(format!(
                "cosine of {}-dim and {}-dim rows",
                a.cols(),
                b.cols()
            )));
        }
        let (a_hat, a_norm) = normalize_rows(a);
        let (b_hat, b_norm) = normalize_rows(b);
        let sim = a_hat.matmul_t(&b_hat).map(|x| x.clamp(-1.0, 1.0));
        Ok(Self {
            sim,
            a_hat,
            b_hat,
            a_norm,
            b_norm,
        })
    }

    /// Pulls `d sim` back to the two input matrices.
    pub fn backward(&self, d_sim: &Matrix) -> (Matrix, Matrix) {
        let d_a_hat = d_sim.matmul(&self.b_hat);
        let d_b_hat = d_sim.t_matmul(&self.a_hat);
        (
            unnormalize_grad(&self.a_hat, &self.a_norm, d_a_hat),
            unnormalize_grad(&self.b_hat, &self.b_norm, d_b_hat),
        )
    }
}

// d x = (d x̂ − (d x̂ · x̂) x̂) / |x|, zero for zero-norm rows.
fn unnormalize_grad(hat: &Matrix, norms: &[f64], mut d_hat: Matrix) -> Matrix {
    for (i, &n) in norms.iter().enumerate() {
        let xh = hat.row(i);
        let r = d_hat.row_mut(i);
        if n == 0.0 {
            r.iter_mut().for_each(|x| *x = 0.0);
            continue;
        }
        let proj = dot(r, xh);
        for (d, &x) in r.iter_mut().zip(xh) {
            *d = (*d - proj * x) / n;
        }
    }
    d_hat
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_variants_agree_with_naive_product() {
        let a = Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.0, 3.0, 1.5]]).unwrap();
        let b = Matrix::from_rows(&[[2.0, 1.0], [0.0, -1.0], [4.0, 0.25]]).unwrap();
        let want = naive_matmul(&a, &b);
        assert!(a.matmul(&b).max_abs_diff(&want) < 1e-15);
        assert!(a.transpose().t_matmul(&b).max_abs_diff(&want) < 1e-15);
        assert!(a.matmul_t(&b.transpose()).max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
        let c = CosineMatrix::new(
            &Matrix::from_rows(&[[0.0, 0.0]]).unwrap(),
            &Matrix::from_rows(&[[1.0, 2.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(c.sim[(0, 0)], 0.0);
        let (da, _) = c.backward(&Matrix::filled(1, 1, 1.0));
        assert_eq!(da.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn cosine_backward_matches_finite_differences() {
        let a = Matrix::from_rows(&[[0.3, -1.2, 0.7], [1.0, 0.4, -0.2]]).unwrap();
        let b = Matrix::from_rows(&[[0.5, 0.5, 0.1], [-0.3, 0.9, 1.1], [0.2, 0.0, -0.8]]).unwrap();
        let weights = Matrix::from_rows(&[[1.0, -0.5, 2.0], [0.3, 0.7, -1.1]]).unwrap();
        let f = |a: &Matrix, b: &Matrix| -> f64 {
            let c = CosineMatrix::new(a, b).unwrap();
            dot(c.sim.as_slice(), weights.as_slice())
        };
        let (da, db) = CosineMatrix::new(&a, &b).unwrap().backward(&weights);
        let h = 1e-6;
        for k in 0..a.as_slice().len() {
            let (mut p, mut m) = (a.clone(), a.clone());
            p.as_mut_slice()[k] += h;
            m.as_mut_slice()[k] -= h;
            let fd = (f(&p, &b) - f(&m, &b)) / (2.0 * h);
            assert!((fd - da.as_slice()[k]).abs() < 1e-7);
        }
        for k in 0..b.as_slice().len() {
            let (mut p, mut m) = (b.clone(), b.clone());
            p.as_mut_slice()[k] += h;
            m.as_mut_slice()[k] -= h;
            let fd = (f(&a, &p) - f(&a, &m)) / (2.0 * h);
            assert!((fd - db.as_slice()[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_sums_to_one_without_overflow() {
        let p = softmax(&[1e6, 1e6 - 1.0, -1e6]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|x| x.is_finite()));
    }
}
