#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use velonet::nn::{Mode, Module};
use velonet::tensor::{prefixed, Parameterized, Tape, Tensor, Var};
use velonet::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// A layer plus a trainable input, so input gradients get checked too.
pub struct WithInput<L> {
    pub layer: L,
    pub input: Tensor,
}

impl<L: Parameterized> Parameterized for WithInput<L> {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("layer", self.layer.named_tensors());
        v.push(("input".into(), &self.input));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed("layer", self.layer.named_tensors_mut());
        v.push(("input".into(), &mut self.input));
        v
    }
}

impl<L: Module> WithInput<L> {
    pub fn new(mut layer: L, shape: &[usize], rng: &mut ChaCha8Rng, mode: Mode) -> Self {
        layer.set_mode(mode);
        let n = shape.iter().product();
        let input = Tensor::param(shape, normal_vec(rng, n)).unwrap();
        WithInput { layer, input }
    }
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output element matters
/// with a distinct weight.
pub fn projection(tape: &mut Tape, y: Var, r: &[f64]) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let rv = tape.constant(&shape, r.to_vec())?;
    let p = tape.mul(y, rv)?;
    tape.sum(p, None)
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}
pub mod layers;

/// Runs the command-line binary; returns exit code, stdout and stderr.
pub fn velonet_cli(args: &[&str]) -> (i32, String, String) {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_velonet")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}
