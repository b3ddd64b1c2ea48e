//! Dense f32 tensors and reverse-mode automatic differentiation.
//!
//! `Tensor` is the plain value type: a row-major f32 buffer plus shape, with
//! an optional gradient buffer of the same shape. Differentiable computation
//! happens on a [`Tape`]: tensors are lifted onto the tape as leaves, ops on
//! [`Value`] handles record their backward rule, and `Tape::backward`
//! populates gradients for every leaf reachable from a scalar loss.
//!
//! All kernels accumulate in a fixed left-to-right order, so repeated runs
//! with identical inputs are bitwise identical. No op ever lets a NaN or Inf
//! through silently: leaves are checked on entry and every op checks its
//! output.

mod grad_check;
mod tape;

pub use grad_check::grad_check;
pub use tape::{Grads, Tape, UnaryKind, Value};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data. Fails when the element
    /// count does not match or any dimension is zero.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; n]).expect("zeros: valid shape")
    }

    pub fn full(shape: &[usize], v: f32) -> Self {
        let n = shape.iter().product();
        Tensor::from_vec(shape, vec![v; n]).expect("full: valid shape")
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::from_vec(&[1], vec![v]).expect("scalar")
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| f(i)).collect();
        Tensor::from_vec(shape, data).expect("from_fn: valid shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// In-place access for parameter updates. Callers must not mutate tensors
    /// that are currently lifted onto a tape.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Attach a gradient buffer (same length as data).
    pub fn set_grad(&mut self, grad: Vec<f32>) {
        assert_eq!(grad.len(), self.data.len(), "grad length mismatch");
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.numel(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }
}

pub(crate) fn check_finite(data: &[f32], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
