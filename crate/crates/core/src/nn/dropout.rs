use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Mode, Module};
use crate::error::{ensure, Result};
use crate::tensor::{Parameterized, Tape, Tensor, Var};

/// Inverted dropout: survivors are scaled by `1/(1−rate)` in train mode,
/// eval mode is the identity.
#[derive(Debug, Clone)]
pub struct DropoutLayer {
    pub rate: f64,
    pub mode: Mode,
    rng: ChaCha8Rng,
}

impl DropoutLayer {
    pub fn new(rate: f64, seed: u64) -> Result<Self> {
        ensure!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1), got {rate}");
        Ok(DropoutLayer { rate, mode: Mode::Train, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if self.mode == Mode::Eval || self.rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let n = tape.value(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let shape = tape.shape(x).to_vec();
        let m = tape.constant(&shape, mask)?;
        tape.mul(x, m)
    }
}

impl Parameterized for DropoutLayer {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        Vec::new()
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        Vec::new()
    }
}

impl Module for DropoutLayer {
    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }
}
