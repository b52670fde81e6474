//! Dense row-major `f64` matrices.
//!
//! Everything in the model is 2-D: feature matrices are `n x d`, parameter
//! matrices `d_in x d_out`, vectors are `n x 1` columns and scalars `1 x 1`.
//! All reductions accumulate left-to-right in index order so repeated runs
//! produce bitwise-identical results.

use crate::{Error, Result};

/// Inputs to `ln` are clamped to this floor so KL terms never produce `-inf`.
pub const LOG_FLOOR: f64 = 1e-30;

/// Row norms below this are treated as zero when normalizing.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data length must match shape");
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "expected 1x1 tensor");
        self.data[0]
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape());
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape());
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape());
        self.zip(other, |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    /// Broadcast a `1 x d` row over every row of an `n x d` matrix.
    pub fn add_row(&self, bias: &Tensor) -> Tensor {
        assert_eq!(bias.rows, 1);
        assert_eq!(bias.cols, self.cols);
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[i * self.cols + j] += bias.data[j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions must agree");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                let orow = &mut out.data[i * m..(i + 1) * m];
                for j in 0..m {
                    orow[j] += a * brow[j];
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| if v > 0.0 { v } else { 0.0 })
    }

    /// Row-wise softmax with max subtraction.
    pub fn row_softmax(&self) -> Tensor {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = &mut out.data[i * self.cols..(i + 1) * self.cols];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        out
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn row_log_softmax(&self) -> Tensor {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = &mut out.data[i * self.cols..(i + 1) * self.cols];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for v in row.iter() {
                sum += (*v - mx).exp();
            }
            let lse = mx + sum.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        out
    }

    /// Natural log with the input clamped to [`LOG_FLOOR`].
    pub fn log_clamped(&self) -> Tensor {
        self.map(|v| v.max(LOG_FLOOR).ln())
    }

    pub fn sum(&self) -> f64 {
        let mut s = 0.0;
        for &v in &self.data {
            s += v;
        }
        s
    }

    /// Sum each row into an `n x 1` column.
    pub fn row_sum(&self) -> Tensor {
        let mut out = Tensor::zeros(self.rows, 1);
        for i in 0..self.rows {
            let mut s = 0.0;
            for j in 0..self.cols {
                s += self.data[i * self.cols + j];
            }
            out.data[i] = s;
        }
        out
    }

    /// Scale row `i` of `other` by `self[i, 0]`; `self` is `n x 1`.
    pub fn mul_col(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, 1);
        assert_eq!(self.rows, other.rows);
        let mut out = other.clone();
        for i in 0..other.rows {
            let w = self.data[i];
            for j in 0..other.cols {
                out.data[i * other.cols + j] *= w;
            }
        }
        out
    }

    /// Extract column `j` as an `n x 1` tensor.
    pub fn col_slice(&self, j: usize) -> Tensor {
        assert!(j < self.cols);
        let mut out = Tensor::zeros(self.rows, 1);
        for i in 0..self.rows {
            out.data[i] = self.data[i * self.cols + j];
        }
        out
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let mut out = Tensor::zeros(indices.len(), self.cols);
        for (k, &i) in indices.iter().enumerate() {
            assert!(i < self.rows);
            out.row_mut(k).copy_from_slice(self.row(i));
        }
        out
    }

    /// Scatter-add rows of `self` into a fresh `out_rows x cols` tensor.
    pub fn scatter_rows(&self, indices: &[usize], out_rows: usize) -> Tensor {
        assert_eq!(indices.len(), self.rows);
        let mut out = Tensor::zeros(out_rows, self.cols);
        for (k, &i) in indices.iter().enumerate() {
            assert!(i < out_rows);
            let src = self.row(k);
            let dst = &mut out.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..self.cols {
                dst[j] += src[j];
            }
        }
        out
    }

    /// Squared Euclidean distances between rows: out[i, m] = ||a_i - b_m||^2.
    pub fn pairwise_sqdist(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols);
        let mut out = Tensor::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for m in 0..other.rows {
                let b = other.row(m);
                let mut s = 0.0;
                for k in 0..self.cols {
                    let d = a[k] - b[k];
                    s += d * d;
                }
                out.data[i * other.rows + m] = s;
            }
        }
        out
    }

    /// L2-normalize each row; rows with norm below [`NORM_FLOOR`] divide by the
    /// floor instead (zero rows stay zero).
    pub fn row_normalize(&self) -> Tensor {
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = &mut out.data[i * self.cols..(i + 1) * self.cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(NORM_FLOOR);
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        out
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&self) -> Tensor {
        assert_eq!(self.rows, self.cols);
        let mut out = Tensor::zeros(self.rows, 1);
        for i in 0..self.rows {
            out.data[i] = self.data[i * self.cols + i];
        }
        out
    }

    /// Column means as a `1 x d` row.
    pub fn col_mean(&self) -> Tensor {
        let mut out = Tensor::zeros(1, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j] += self.data[i * self.cols + j];
            }
        }
        if self.rows > 0 {
            for v in out.data.iter_mut() {
                *v /= self.rows as f64;
            }
        }
        out
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for k in 0..a.len() {
        let d = a[k] - b[k];
        s += d * d;
    }
    s
}
