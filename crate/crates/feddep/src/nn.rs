//! Minimal dense numerical kernel: row-major f64 matrices, activations,
//! losses with explicit gradients, and plain SGD.
//!
//! Every backward function here is checked against central finite
//! differences in the test suite; nothing is tape-based.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix of f64 values.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dimension(
                "Matrix::from_vec",
                format!("{}x{}", rows, cols),
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    /// Uniform init in [-limit, limit], Glorot-style when `limit` is
    /// sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// self + scale * other, in place.
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|a| *a = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Vertical concatenation of two column vectors.
    pub fn vcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dimension(
                "Matrix::vcat",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut data = Vec::with_capacity((self.rows + other.rows) * self.cols);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Split columns at `at`: returns (self[:, ..at], self[:, at..]).
    pub fn split_cols(&self, at: usize) -> (Matrix, Matrix) {
        debug_assert!(at <= self.cols);
        let left = Matrix::from_fn(self.rows, at, |i, j| self.get(i, j));
        let right = Matrix::from_fn(self.rows, self.cols - at, |i, j| self.get(i, at + j));
        (left, right)
    }

    /// Split rows at `at`: returns (self[..at, :], self[at.., :]).
    pub fn split_rows(&self, at: usize) -> (Matrix, Matrix) {
        debug_assert!(at <= self.rows);
        let top = Matrix::from_fn(at, self.cols, |i, j| self.get(i, j));
        let bottom = Matrix::from_fn(self.rows - at, self.cols, |i, j| self.get(at + i, j));
        (top, bottom)
    }
}

/// W x input. The linear map inside every convolution layer.
pub fn dense_forward(w: &Matrix, input: &Matrix) -> Result<Matrix> {
    if w.cols != input.rows {
        return Err(Error::dimension(
            "dense_forward",
            format!("{}x{}", w.rows, w.cols),
            format!("{}x{}", input.rows, input.cols),
        ));
    }
    let mut out = Matrix::zeros(w.rows, input.cols);
    // ikj loop: accumulate scaled rows of `input` into rows of `out`.
    for i in 0..w.rows {
        let wrow = w.row(i);
        let orow = out.row_mut(i);
        for (k, &wik) in wrow.iter().enumerate() {
            if wik == 0.0 {
                continue;
            }
            let irow = input.row(k);
            for (o, &x) in orow.iter_mut().zip(irow.iter()) {
                *o += wik * x;
            }
        }
    }
    Ok(out)
}

/// Gradients of dense_forward: grad_W = upstream x input^T, grad_input = W^T x upstream.
pub fn dense_backward(
    w: &Matrix,
    input: &Matrix,
    upstream: &Matrix,
) -> Result<(Matrix, Matrix)> {
    if w.cols != input.rows || upstream.rows != w.rows || upstream.cols != input.cols {
        return Err(Error::dimension(
            "dense_backward",
            format!("W {}x{}, input {}x{}", w.rows, w.cols, input.rows, input.cols),
            format!("upstream {}x{}", upstream.rows, upstream.cols),
        ));
    }
    // grad_w[i][k] = sum_j upstream[i][j] * input[k][j]
    let mut grad_w = Matrix::zeros(w.rows, w.cols);
    for i in 0..w.rows {
        let urow = upstream.row(i);
        let grow = grad_w.row_mut(i);
        for k in 0..input.rows {
            let irow = input.row(k);
            let mut acc = 0.0;
            for (u, x) in urow.iter().zip(irow.iter()) {
                acc += u * x;
            }
            grow[k] = acc;
        }
    }
    // grad_input[k][j] = sum_i w[i][k] * upstream[i][j]
    let mut grad_input = Matrix::zeros(input.rows, input.cols);
    for i in 0..w.rows {
        let wrow = w.row(i);
        let urow = upstream.row(i);
        for (k, &wik) in wrow.iter().enumerate() {
            if wik == 0.0 {
                continue;
            }
            let grow = grad_input.row_mut(k);
            for (g, &u) in grow.iter_mut().zip(urow.iter()) {
                *g += wik * u;
            }
        }
    }
    Ok((grad_w, grad_input))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
    Identity,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn forward(self, input: &Matrix) -> Matrix {
        let mut out = input.clone();
        match self {
            Activation::Sigmoid => out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v)),
            Activation::Relu => out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Identity => {}
        }
        out
    }

    /// Element-wise derivative at pre-activation `input`, times `upstream`.
    pub fn backward(self, input: &Matrix, upstream: &Matrix) -> Matrix {
        debug_assert_eq!(input.rows, upstream.rows);
        debug_assert_eq!(input.cols, upstream.cols);
        let mut out = upstream.clone();
        match self {
            Activation::Sigmoid => {
                for (g, &x) in out.data_mut().iter_mut().zip(input.data().iter()) {
                    let s = sigmoid(x);
                    *g *= s * (1.0 - s);
                }
            }
            Activation::Relu => {
                for (g, &x) in out.data_mut().iter_mut().zip(input.data().iter()) {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::Identity => {}
        }
        out
    }
}

/// Softmax cross-entropy over a column of logits, stabilized by max-subtraction.
/// Returns the loss and the gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Matrix, label: usize) -> Result<(f64, Matrix)> {
    if label >= logits.rows() {
        return Err(Error::Index(format!(
            "label {} out of range for {} logits",
            label,
            logits.rows()
        )));
    }
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(exps[label] / sum).ln();
    let mut grad = Matrix::zeros(logits.rows(), 1);
    for (i, e) in exps.iter().enumerate() {
        let p = e / sum;
        grad.data_mut()[i] = if i == label { p - 1.0 } else { p };
    }
    Ok((loss, grad))
}

/// Smooth-L1 (Huber, threshold 1): loss and derivative.
pub fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

/// Named-parameter map with gradient accumulators.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.params.insert(name.into(), Param { value, grad });
    }

    pub fn value(&self, name: &str) -> &Matrix {
        &self.params[name].value
    }

    pub fn value_mut(&mut self, name: &str) -> &mut Matrix {
        &mut self.params.get_mut(name).unwrap().value
    }

    pub fn accumulate(&mut self, name: &str, grad: &Matrix) {
        self.params.get_mut(name).unwrap().grad.add_scaled(grad, 1.0);
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in self.params.values_mut() {
            p.grad.scale(s);
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// value <- value - lr * grad for every parameter, then grads are zeroed.
pub fn sgd_step(params: &mut ParamStore, learning_rate: f64) {
    for p in params.params.values_mut() {
        p.value.add_scaled(&p.grad, -learning_rate);
        p.grad.fill(0.0);
    }
}

/// Finite-difference helpers for gradient verification in tests.
pub mod gradcheck {
    /// Central finite difference of a scalar function, perturbation 1e-5.
    pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
        let h = 1e-5;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    pub fn rel_err(a: f64, b: f64) -> f64 {
        let denom = a.abs().max(b.abs()).max(1e-8);
        (a - b).abs() / denom
    }
}
