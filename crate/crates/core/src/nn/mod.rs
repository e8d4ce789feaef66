//! One-dimensional neural layers built on the tape.

mod batchnorm;
mod conv;
mod dropout;
mod linear;
mod pool;

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub use batchnorm::BatchNorm1dLayer;
pub use conv::Conv1dLayer;
pub use dropout::DropoutLayer;
pub use linear::LinearLayer;
pub use pool::{global_pool, maxpool1d, PoolAxis, PoolOp};

use crate::tensor::{Parameterized, Tensor};

/// Whether stochastic and batch-statistics layers behave as in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

pub trait Module: Parameterized {
    fn set_mode(&mut self, _mode: Mode) {}
}

/// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), marked trainable.
pub(crate) fn kaiming_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::param(shape, data).expect("init shape")
}

pub(crate) fn zeros_param(shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.set_requires_grad(true);
    t
}
