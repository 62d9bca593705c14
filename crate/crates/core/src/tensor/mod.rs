//! Dense row-major `f64` tensors with tape-based reverse-mode autodiff.

mod gradcheck;
mod optim;
mod params;
mod tape;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{adam_step, AdamState};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let len: usize = shape.iter().product();
        if len != values.len() {
            bail!(
                Dimension,
                "shape {:?} needs {} values, got {}",
                shape,
                len,
                values.len()
            );
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            values: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(&[values.len()], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], values)
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.values[i * n + i] = 1.0;
        }
        Ok(t)
    }

    /// Marks the tensor as a differentiable leaf.
    pub fn requiring_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => bail!(Dimension, "expected a matrix, got shape {:?}", self.shape),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.shape[self.shape.len() - 1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.values[row * cols..(row + 1) * cols]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.values.len() {
            bail!(Dimension, "cannot reshape {:?} into {:?}", self.shape, shape);
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<f64>>) {
        self.grad = grad;
    }

    pub(crate) fn grad_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.grad.as_mut()
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        bail!(Dimension, "shape {:?} must be non-empty with positive extents", shape);
    }
    Ok(())
}

/// Plain matrix product without recording, `a[m×n] · b[n×p]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let (n2, p) = b.dims2()?;
    if n != n2 {
        bail!(
            Dimension,
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape,
            b.shape
        );
    }
    let mut out = vec![0.0; m * p];
    matmul_into(&a.values, &b.values, &mut out, m, n, p);
    Tensor::matrix(m, p, out)
}

/// Accumulates `a[m×n] · b[n×p]` into `out`. For each output entry the
/// products are added in ascending `k`, the same order as the textbook
/// triple loop.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let out_row = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * p..(k + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// Numerically stable softmax along `axis` of a row-major array.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape.len() {
        bail!(Dimension, "softmax axis {} invalid for shape {:?}", axis, x.shape);
    }
    let mut out = x.values.clone();
    softmax_in_place(&mut out, &x.shape, axis);
    Tensor::new(&x.shape, out)
}

pub(crate) fn softmax_in_place(values: &mut [f64], shape: &[usize], axis: usize) {
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            let mut max = f64::NEG_INFINITY;
            for e in 0..extent {
                max = max.max(values[base + e * inner]);
            }
            let mut sum = 0.0;
            for e in 0..extent {
                let v = crate::math::exp(values[base + e * inner] - max);
                values[base + e * inner] = v;
                sum += v;
            }
            for e in 0..extent {
                values[base + e * inner] /= sum;
            }
        }
    }
}
