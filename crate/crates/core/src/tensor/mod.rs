//! Dense row-major matrices and a small reverse-mode autodiff graph.
//!
//! Everything in the encoder is rank 2: a hidden state is `tokens × width`,
//! weights are `in × out`, biases and norm parameters are `1 × width`.
//! Batches are handled by looping over examples, never by a batch axis.

mod checkpoint;
mod graph;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TensorEntry};
pub use graph::{Gradients, Graph, NodeId};

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{EatError, Result};

/// Element type of a [`Matrix`]. Models run in `f32`; `f64` is used by
/// gradient checks so that finite differences are not swamped by rounding.
pub trait Scalar: Float + Sum + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Default epsilon for layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Additive penalty applied to disallowed attention logits.
pub const MASK_PENALTY: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(EatError::Shape {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn row_vector(data: Vec<T>) -> Self {
        let cols = data.len();
        Matrix {
            rows: 1,
            cols,
            data,
        }
    }

    /// Builds a matrix by evaluating `f(row, col)` at every position.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Converts every entry to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix<T>) -> T {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    fn check_same(&self, other: &Matrix<T>, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(EatError::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(())
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(EatError::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (n, m, p) = (self.rows, self.cols, other.cols);
        let mut out = vec![T::zero(); n * p];
        for i in 0..n {
            let a_row = &self.data[i * m..(i + 1) * m];
            let o_row = &mut out[i * p..(i + 1) * p];
            for (k, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let b_row = &other.data[k * p..(k + 1) * p];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(Matrix {
            rows: n,
            cols: p,
            data: out,
        })
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.cols {
            return Err(EatError::Shape {
                op: "matmul_nt",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (n, p) = (self.rows, other.rows);
        let mut out = Vec::with_capacity(n * p);
        for i in 0..n {
            let a = self.row(i);
            for j in 0..p {
                out.push(dot(a, other.row(j)));
            }
        }
        Ok(Matrix {
            rows: n,
            cols: p,
            data: out,
        })
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.rows != other.rows {
            return Err(EatError::Shape {
                op: "matmul_tn",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (m, p) = (self.cols, other.cols);
        let mut out = vec![T::zero(); m * p];
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let o_row = &mut out[i * p..(i + 1) * p];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(Matrix {
            rows: m,
            cols: p,
            data: out,
        })
    }

    pub fn transpose(&self) -> Matrix<T> {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn add(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_same(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_same(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_same(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn scale(&self, s: T) -> Matrix<T> {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Matrix<T>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Adds a `1 × cols` row to every row.
    pub fn add_row(&self, bias: &Matrix<T>) -> Result<Matrix<T>> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(EatError::Shape {
                op: "add_row",
                lhs: self.shape(),
                rhs: bias.shape(),
            });
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o = *o + b;
            }
        }
        Ok(out)
    }

    /// Column sums as a `1 × cols` row.
    pub fn col_sums(&self) -> Matrix<T> {
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (o, &v) in out.iter_mut().zip(self.row(r)) {
                *o = *o + v;
            }
        }
        Matrix::row_vector(out)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&self) -> Result<Matrix<T>> {
        if self.data.iter().any(|v| v.is_nan()) {
            return Err(EatError::NonFinite("softmax_rows"));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        Ok(out)
    }

    pub fn log_softmax_rows(&self) -> Result<Matrix<T>> {
        if self.data.iter().any(|v| v.is_nan()) {
            return Err(EatError::NonFinite("log_softmax_rows"));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        Ok(out)
    }

    /// Row-wise layer normalization followed by the affine `gain`/`bias`.
    pub fn layer_norm(&self, gain: &Matrix<T>, bias: &Matrix<T>, eps: f64) -> Result<Matrix<T>> {
        Ok(self.layer_norm_with_stats(gain, bias, eps)?.0)
    }

    /// Returns the output, the normalized pre-affine values and per-row `1/σ`.
    pub(crate) fn layer_norm_with_stats(
        &self,
        gain: &Matrix<T>,
        bias: &Matrix<T>,
        eps: f64,
    ) -> Result<(Matrix<T>, Matrix<T>, Vec<T>)> {
        for p in [gain, bias] {
            if p.rows != 1 || p.cols != self.cols {
                return Err(EatError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(),
                    rhs: p.shape(),
                });
            }
        }
        let n = T::of(self.cols as f64);
        let eps = T::of(eps);
        let mut normed = self.clone();
        let mut inv_std = Vec::with_capacity(self.rows);
        for r in 0..self.rows {
            let row = normed.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let mut out = normed.clone();
        for r in 0..out.rows {
            for ((o, &g), &b) in out.row_mut(r).iter_mut().zip(&gain.data).zip(&bias.data) {
                *o = *o * g + b;
            }
        }
        Ok((out, normed, inv_std))
    }

    pub fn gelu(&self) -> Matrix<T> {
        self.map(gelu)
    }

    /// Gathers rows by index, in the order given.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Matrix<T>> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(EatError::invalid(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        })
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Matrix<T>> {
        if start + len > self.cols {
            return Err(EatError::invalid(format!(
                "column slice {start}..{} out of range for {} cols",
                start + len,
                self.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, len, |r, c| self.get(r, start + c)))
    }

    pub fn concat_cols(parts: &[&Matrix<T>]) -> Result<Matrix<T>> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(EatError::Shape {
                op: "concat_cols",
                lhs: (rows, 0),
                rhs: bad.shape(),
            });
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Softmax of a slice into a fresh vector (no NaN check).
pub fn softmax<T: Scalar>(values: &[T]) -> Vec<T> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// tanh approximation of GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let d_inner = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * d_inner
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0f64;
            for k in 0..a.cols() {
                s += a.get(i, k) as f64 * b.get(k, j) as f64;
            }
            s as f32
        })
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        assert_eq!(a.matmul(&Matrix::identity(4)).unwrap(), a);
        let z = a.matmul(&Matrix::zeros(4, 5)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let got = a.matmul(&b).unwrap();
        assert!(got.max_abs_diff(&triple_loop(&a, &b)) < 1e-6);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::<f32>::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(EatError::Shape { .. })));
    }

    #[test]
    fn matmul_on_random_shape_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (n, m, p) = (
                rng.random_range(1..9),
                rng.random_range(1..9),
                rng.random_range(1..9),
            );
            let a = random(&mut rng, n, m);
            let b = random(&mut rng, m, p);
            let reference = triple_loop(&a, &b);
            let got = a.matmul(&b).unwrap();
            for (g, r) in got.data().iter().zip(reference.data()) {
                assert!((g - r).abs() <= 1e-6 * r.abs().max(1.0));
            }
            assert!(a.matmul_nt(&b.transpose()).unwrap().max_abs_diff(&reference) < 1e-5);
            assert!(a.transpose().matmul_tn(&b).unwrap().max_abs_diff(&reference) < 1e-5);
        }
    }

    #[test]
    fn softmax_uniform_and_stabilized() {
        let m = Matrix::filled(1, 5, 3.0).softmax_rows().unwrap();
        assert!(m.data().iter().all(|&v| (v - 0.2).abs() < 1e-7));
        let m = Matrix::row_vector(vec![1000.0, 0.0]).softmax_rows().unwrap();
        assert!((m.get(0, 0) - 1.0).abs() < 1e-7 && m.get(0, 1) >= 0.0);
        assert!(m.is_finite());
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let row: Vec<f32> = (0..7).map(|_| rng.random_range(-3.0..3.0)).collect();
        let denom: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
        let got = Matrix::row_vector(row.clone()).softmax_rows().unwrap();
        for (g, v) in got.data().iter().zip(&row) {
            assert!((*g as f64 - (*v as f64).exp() / denom).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let m = Matrix::row_vector(vec![f32::NAN, 1.0]);
        assert!(m.softmax_rows().is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let ones = Matrix::filled(1, 3, 1.0f32);
        let zeros = Matrix::<f32>::zeros(1, 3);
        let c = Matrix::filled(1, 3, 7.5).layer_norm(&ones, &zeros, LAYER_NORM_EPS).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));

        // mean 2, population variance 2/3
        let out = Matrix::row_vector(vec![1.0, 2.0, 3.0])
            .layer_norm(&ones, &zeros, LAYER_NORM_EPS)
            .unwrap();
        let sd = (2.0f32 / 3.0 + LAYER_NORM_EPS as f32).sqrt();
        let expected = [-1.0 / sd, 0.0, 1.0 / sd];
        for (o, e) in out.data().iter().zip(expected) {
            assert!((o - e).abs() < 1e-5);
        }
        let mean: f32 = out.data().iter().sum::<f32>() / 3.0;
        let var: f32 = out.data().iter().map(|v| v * v).sum::<f32>() / 3.0;
        assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-4);

        let shifted = Matrix::row_vector(vec![101.0, 102.0, 103.0])
            .layer_norm(&ones, &zeros, LAYER_NORM_EPS)
            .unwrap();
        assert!(shifted.max_abs_diff(&out) < 1e-5);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0f32, -1.0, -0.1, 0.0, 0.5, 2.0] {
            let h = 1e-3;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-3, "x={x}");
        }
    }
}
