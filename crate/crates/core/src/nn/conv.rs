use rand::Rng;

use super::{kaiming_normal, zeros_param, Module};
use crate::error::{ensure, Result};
use crate::tensor::{Parameterized, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv1dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(
            in_channels > 0 && out_channels > 0 && kernel_size > 0 && stride > 0,
            "conv1d: channels, kernel and stride must be positive"
        );
        let weight = kaiming_normal(&[out_channels, in_channels, kernel_size], in_channels * kernel_size, rng);
        Ok(Conv1dLayer {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding,
            dilation: 1,
            weight,
            bias: bias.then(|| zeros_param(&[out_channels])),
        })
    }

    pub fn output_len(&self, len_in: usize) -> Option<usize> {
        crate::tensor::conv_len(len_in, self.kernel_size, self.stride, self.padding, self.dilation)
            .filter(|&l| l >= 1)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        ensure!(
            s.len() == 3 && s[1] == self.in_channels,
            "conv1d: expected [B, {}, L] input, got {s:?}",
            self.in_channels
        );
        let w = tape.leaf(&self.weight);
        let b = self.bias.as_ref().map(|b| tape.leaf(b));
        tape.conv1d(x, w, b, self.stride, self.padding, self.dilation)
    }
}

impl Parameterized for Conv1dLayer {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("weight".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![("weight".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }
}

impl Module for Conv1dLayer {}
