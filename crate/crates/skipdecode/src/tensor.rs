//! Dense row-major 2-D tensors and the handful of kernels the engine needs.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32`
//! (default inference path) and `f64` (reference path for gradient checks).
//! Kernels are plain loops: the artifact tests policy semantics, not
//! throughput, and scalar loops keep results deterministic.

use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::{Error, Result};

/// Element type for tensors: `f32` or `f64`.
pub trait Scalar:
    Copy
    + PartialOrd
    + PartialEq
    + std::fmt::Debug
    + std::fmt::Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn powi(self, n: i32) -> Self {
                self.powi(n)
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            fn minimum(self, other: Self) -> Self {
                if self < other {
                    self
                } else {
                    other
                }
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D<S: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Tensor2D<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![S::ZERO; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: S) -> Self {
        Tensor2D {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a tensor from a flat row-major vector.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "tensor data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Tensor2D { rows, cols, data })
    }

    /// Builds a tensor from nested row slices; rows must be equally long.
    pub fn from_rows(rows: &[&[S]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::contract("ragged rows in from_rows"));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor2D { rows: r, cols: c, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = S::ONE;
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> S {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: S) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Standard matrix product `self x other`.
    pub fn matmul(&self, other: &Tensor2D<S>) -> Result<Tensor2D<S>> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = Tensor2D::zeros(m, n);
        // i-k-j order: streams over rows of `other`, cache friendly for row-major.
        for i in 0..m {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for kk in 0..k {
                let a = self.data[i * k + kk];
                if a == S::ZERO {
                    continue;
                }
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for j in 0..n {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        Ok(out)
    }

    /// `self x other^T`, without materializing the transpose.
    pub fn matmul_transb(&self, other: &Tensor2D<S>) -> Result<Tensor2D<S>> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_transb",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.rows);
        let mut out = Tensor2D::zeros(m, n);
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = S::ZERO;
                for kk in 0..k {
                    acc += a_row[kk] * b_row[kk];
                }
                out.data[i * n + j] = acc;
            }
        }
        Ok(out)
    }

    /// `self^T x other`, without materializing the transpose.
    pub fn matmul_transa(&self, other: &Tensor2D<S>) -> Result<Tensor2D<S>> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul_transa",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, k, n) = (self.cols, self.rows, other.cols);
        let mut out = Tensor2D::zeros(m, n);
        for kk in 0..k {
            let a_row = &self.data[kk * m..(kk + 1) * m];
            let b_row = &other.data[kk * n..(kk + 1) * n];
            for i in 0..m {
                let a = a_row[i];
                if a == S::ZERO {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        Ok(out)
    }

    /// Row-wise softmax with optional per-entry mask (`false` = masked out).
    ///
    /// Stabilized by row-max subtraction; masked entries come out exactly 0.
    /// A fully masked row is a contract violation.
    pub fn softmax_rows(&self, mask: Option<&[bool]>) -> Result<Tensor2D<S>> {
        if let Some(m) = mask {
            if m.len() != self.data.len() {
                return Err(Error::contract(format!(
                    "softmax mask length {} != {} entries",
                    m.len(),
                    self.data.len()
                )));
            }
        }
        let mut out = Tensor2D::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let base = r * self.cols;
            let live = |c: usize| mask.is_none_or(|m| m[base + c]);

            let mut max = None::<S>;
            for c in 0..self.cols {
                if live(c) {
                    let v = self.data[base + c];
                    max = Some(match max {
                        Some(m) => m.maximum(v),
                        None => v,
                    });
                }
            }
            let max = max.ok_or_else(|| {
                Error::contract(format!("softmax_rows: row {r} is fully masked"))
            })?;

            let mut sum = S::ZERO;
            for c in 0..self.cols {
                if live(c) {
                    let e = (self.data[base + c] - max).exp();
                    out.data[base + c] = e;
                    sum += e;
                }
            }
            for c in 0..self.cols {
                if live(c) {
                    out.data[base + c] /= sum;
                }
            }
        }
        Ok(out)
    }

    /// Per-row layer normalization followed by a learned affine transform.
    pub fn layer_norm(&self, gain: &[S], bias: &[S], eps: S) -> Result<Tensor2D<S>> {
        if gain.len() != self.cols || bias.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(),
                right: (gain.len(), bias.len()),
            });
        }
        let mut out = Tensor2D::zeros(self.rows, self.cols);
        let n = S::from_f64(self.cols as f64);
        for r in 0..self.rows {
            let row = self.row(r);
            let mut mean = S::ZERO;
            for &v in row {
                mean += v;
            }
            mean /= n;
            let mut var = S::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var /= n;
            let rstd = S::ONE / (var + eps).sqrt();
            let out_row = out.row_mut(r);
            for c in 0..row.len() {
                out_row[c] = (row[c] - mean) * rstd * gain[c] + bias[c];
            }
        }
        Ok(out)
    }

    /// Elementwise GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor2D<S> {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v = gelu_scalar(*v);
        }
        out
    }

    pub fn add(&self, other: &Tensor2D<S>) -> Result<Tensor2D<S>> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = self.clone();
        for (o, &b) in out.data.iter_mut().zip(&other.data) {
            *o += b;
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor2D<S>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_assign",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (o, &b) in self.data.iter_mut().zip(&other.data) {
            *o += b;
        }
        Ok(())
    }

    /// Adds `row` to every row of `self` (bias broadcast).
    pub fn add_row_broadcast(&mut self, row: &[S]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                left: self.shape(),
                right: (1, row.len()),
            });
        }
        for r in 0..self.rows {
            let out_row = self.row_mut(r);
            for c in 0..row.len() {
                out_row[c] += row[c];
            }
        }
        Ok(())
    }

    pub fn scale(&self, factor: S) -> Tensor2D<S> {
        let mut out = self.clone();
        for v in out.data.iter_mut() {
            *v *= factor;
        }
        out
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor2D<S>) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut worst = 0.0f64;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            worst = worst.max((a.to_f64() - b.to_f64()).abs());
        }
        Ok(worst)
    }

    /// Converts element type, rounding through `f64`.
    pub fn cast<T: Scalar>(&self) -> Tensor2D<T> {
        Tensor2D {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }
}

/// GELU (tanh approximation) on one value.
#[inline]
pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (S::ONE + inner.tanh())
}

/// Derivative of the tanh-approximation GELU on one value.
#[inline]
pub fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654);
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * c * (S::ONE + three * k * x * x)
}
