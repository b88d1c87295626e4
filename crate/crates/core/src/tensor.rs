//! Dense row-major tensors.
//!
//! A [`Tensor`] is a plain value: its data is only changed by explicit
//! parameter updates, and its gradient buffer only by
//! [`Gradients::accumulate_into`](crate::Gradients::accumulate_into).
//! Tensors flagged `frozen` keep an all-zero gradient buffer no matter how
//! many backward passes run.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels;
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    frozen: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::config("shape", "extents must be positive"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            frozen: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("positive extents")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("positive extents")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("non-empty vector")
    }

    pub fn scalar(v: f64) -> Self {
        Self::vector(vec![v])
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::config("rows", "ragged rows"));
        }
        Self::new(&[r, c], rows.iter().flat_map(|x| x.iter().copied()).collect())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian entries with standard deviation `scale`.
    pub fn randn(shape: &[usize], scale: f64, rng: &mut SeededRng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| scale * rng.normal()).collect();
        Self::new(shape, data).expect("positive extents")
    }

    /// Marks this tensor as a trainable parameter.
    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of the matrix view (1 for vectors).
    pub fn rows(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[..self.shape.len() - 1].iter().product()
        } else {
            1
        }
    }

    /// Length of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Excludes the tensor from gradient accumulation and resets its
    /// gradient buffer to zeros.
    pub fn freeze(&mut self) {
        self.frozen = true;
        self.grad = Some(vec![0.0; self.data.len()]);
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        if frozen {
            self.freeze();
        } else {
            self.frozen = false;
        }
    }

    /// Whether the tape should track gradients for this tensor.
    pub fn is_trainable(&self) -> bool {
        self.requires_grad && !self.frozen
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer. No-op for frozen tensors.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        if self.frozen {
            return;
        }
        assert_eq!(g.len(), self.data.len(), "gradient length");
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, &x) in buf.iter_mut().zip(g) {
            *b += x;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::shape(op, &self.shape, &[0, 0])),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = other.matrix_dims("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(&[m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; r * c];
        kernels::transpose(&self.data, r, c, &mut out);
        Tensor::new(&[c, r], out)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor::new(&self.shape, data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(&self.shape, self.data.iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|x| x * s)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|x| x.max(0.0))
    }

    /// Softmax over the last dimension. Entries at or below the mask
    /// sentinel become exactly zero.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let mut out = vec![0.0; self.data.len()];
        kernels::softmax_rows(&self.data, self.cols(), &mut out)
            .map_err(|row| Error::EmptyAttentionRow { row })?;
        Tensor::new(&self.shape, out)
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_lastdim(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::config("parts", "nothing to concatenate"))?;
        let lead = &first.shape[..first.shape.len() - 1];
        let rows = first.rows();
        for p in parts {
            if &p.shape[..p.shape.len() - 1] != lead {
                return Err(Error::shape("concat_lastdim", &first.shape, &p.shape));
            }
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Tensor::new(&shape, data)
    }

    /// Concatenates matrices along the first (row) dimension.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::config("parts", "nothing to concatenate"))?;
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(Error::shape("concat_rows", &first.shape, &p.shape));
            }
            rows += p.rows();
            data.extend_from_slice(&p.data);
        }
        Tensor::new(&[rows, cols], data)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        let c = self.cols();
        if len == 0 || start + len > self.rows() {
            return Err(Error::shape("slice_rows", &self.shape, &[start, len]));
        }
        Tensor::new(&[len, c], self.data[start * c..(start + len) * c].to_vec())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Smallest integer not below `x`, as used for expert budgets.
pub fn ceil_scalar(x: f64) -> f64 {
    libm::ceil(x)
}
