//! Dense row-major tensors and a reverse-mode tape.
//!
//! A [`Tensor`] is a plain value: shape, data, and an optional gradient
//! buffer. Computation happens on a [`Tape`], which records every primitive
//! applied to [`Var`] handles and replays the records in reverse during
//! [`Tape::backward`]. Parameters enter the tape through [`Tape::leaf`]; once
//! the backward pass has run, [`Parameterized::collect_grads`] accumulates the
//! gradients back into the owning tensors.

mod gemm;
pub mod gradcheck;
mod tape;

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{ensure, Result};

pub use gradcheck::{grad_check, prefixed, GradCheckOptions, GradCheckReport, ParamCheck, Parameterized};
pub use tape::{conv_len, BackwardFault, OpKind, Tape, Var};

/// Identity of a tensor for gradient routing. Clones keep the id, so a
/// cloned network reports gradients against the same logical parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u64);

impl TensorId {
    fn fresh() -> Self {
        static NEXT: AtomicU64 = AtomicU64::new(1);
        TensorId(NEXT.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Debug, Clone)]
pub struct Tensor {
    id: TensorId,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        ensure!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        let numel: usize = shape.iter().product();
        ensure!(
            numel == data.len(),
            "shape {shape:?} holds {numel} elements but {} were supplied",
            data.len()
        );
        Ok(Tensor {
            id: TensorId::fresh(),
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// A trainable tensor: identical to [`Tensor::new`] with `requires_grad` set.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel]).expect("full: positive dimensions")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(&[], vec![value]).expect("scalar")
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(&[n], data).expect("from_vec: non-empty data")
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Replaces the contents in place, keeping identity and gradient state.
    pub fn assign(&mut self, data: &[f64]) -> Result<()> {
        ensure!(
            data.len() == self.data.len(),
            "assign: expected {} elements, got {}",
            self.data.len(),
            data.len()
        );
        self.data.copy_from_slice(data);
        Ok(())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        ensure!(
            g.len() == self.data.len(),
            "gradient has {} elements, tensor has {}",
            g.len(),
            self.data.len()
        );
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> Result<f64> {
        ensure!(self.numel() == 1, "item() on tensor of shape {:?}", self.shape);
        Ok(self.data[0])
    }
}

impl PartialEq for Tensor {
    /// Value equality: shape and data. Identity and gradient state are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
