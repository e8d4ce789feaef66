use rand::Rng;

use super::{kaiming_normal, zeros_param, Module};
use crate::error::{ensure, Result};
use crate::tensor::{Parameterized, Tape, Tensor, Var};

/// `y = x·Wᵀ + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Result<Self> {
        ensure!(in_features > 0 && out_features > 0, "linear: feature counts must be positive");
        Ok(LinearLayer {
            in_features,
            out_features,
            weight: kaiming_normal(&[out_features, in_features], in_features, rng),
            bias: zeros_param(&[out_features]),
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        ensure!(
            s.len() == 2 && s[1] == self.in_features,
            "linear: expected [B, {}] input, got {s:?}",
            self.in_features
        );
        let w = tape.leaf(&self.weight);
        let wt = tape.transpose(w)?;
        let b = tape.leaf(&self.bias);
        let xw = tape.matmul(x, wt)?;
        tape.add(xw, b)
    }
}

impl Parameterized for LinearLayer {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

impl Module for LinearLayer {}
