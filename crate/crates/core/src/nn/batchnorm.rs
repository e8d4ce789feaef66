use super::{zeros_param, Mode, Module};
use crate::error::{ensure, Result};
use crate::tensor::{Parameterized, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct BatchNorm1dLayer {
    pub num_features: usize,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: Mode,
}

impl BatchNorm1dLayer {
    pub fn new(num_features: usize) -> Self {
        let mut gamma = Tensor::full(&[num_features], 1.0);
        gamma.set_requires_grad(true);
        BatchNorm1dLayer {
            num_features,
            gamma,
            beta: zeros_param(&[num_features]),
            running_mean: Tensor::zeros(&[num_features]),
            running_var: Tensor::full(&[num_features], 1.0),
            momentum: 0.1,
            epsilon: 1e-5,
            mode: Mode::Train,
        }
    }

    /// Train mode normalizes with batch statistics over (B, L) and folds
    /// them into the running estimates (unbiased variance); eval mode
    /// applies the running estimates.
    pub fn forward(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        ensure!(
            (s.len() == 3 || s.len() == 2) && s[1] == self.num_features,
            "batchnorm: expected [B, {}, ...] input, got {s:?}",
            self.num_features
        );
        let count = s[0] * s.get(2).copied().unwrap_or(1);
        let gamma = tape.leaf(&self.gamma);
        let beta = tape.leaf(&self.beta);
        match self.mode {
            Mode::Train => {
                let (y, stats) = tape.batch_norm(x, gamma, beta, None, self.epsilon)?;
                let (mean, var) = stats.expect("batch statistics returned in train mode");
                let m = self.momentum;
                let unbias = count as f64 / (count as f64 - 1.0);
                for (r, b) in self.running_mean.data_mut().iter_mut().zip(&mean) {
                    *r = (1.0 - m) * *r + m * b;
                }
                for (r, b) in self.running_var.data_mut().iter_mut().zip(&var) {
                    *r = (1.0 - m) * *r + m * b * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let running = (self.running_mean.data(), self.running_var.data());
                Ok(tape.batch_norm(x, gamma, beta, Some(running), self.epsilon)?.0)
            }
        }
    }
}

impl Parameterized for BatchNorm1dLayer {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("gamma".into(), &self.gamma),
            ("beta".into(), &self.beta),
            ("running_mean".into(), &self.running_mean),
            ("running_var".into(), &self.running_var),
        ]
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("gamma".into(), &mut self.gamma),
            ("beta".into(), &mut self.beta),
            ("running_mean".into(), &mut self.running_mean),
            ("running_var".into(), &mut self.running_var),
        ]
    }
}

impl Module for BatchNorm1dLayer {
    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }
}
