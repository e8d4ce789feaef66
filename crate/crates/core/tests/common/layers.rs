//! Per-layer finite-difference checks shared by the gradient tests and the
//! acceptance gate.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use velonet::cbam::Cbam;
use velonet::nn::{maxpool1d, BatchNorm1dLayer, Conv1dLayer, LinearLayer, Mode, Module};
use velonet::res2net::Res2NetBlock;
use velonet::tensor::{grad_check, GradCheckOptions, GradCheckReport, Parameterized, Tape, Tensor, Var};
use velonet::Result;
use velonet::training::gradcheck_network;
use velonet::velonet::{VeloNet, VeloNetConfig};

use super::{normal_vec, projection, rng, WithInput};

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const NET_TOLERANCE: f64 = 1e-3;

/// Gives every batch-norm layer non-trivial affine and running statistics.
pub fn randomize_bn<M: Parameterized + ?Sized>(m: &mut M, rng: &mut ChaCha8Rng) {
    for (name, t) in m.named_tensors_mut() {
        let n = t.numel();
        let data: Vec<f64> = if name.ends_with("running_var") {
            (0..n).map(|_| rng.random_range(0.5..2.0)).collect()
        } else if name.ends_with("running_mean") || name.ends_with("beta") {
            normal_vec(rng, n).into_iter().map(|v| 0.3 * v).collect()
        } else if name.ends_with("gamma") {
            normal_vec(rng, n).into_iter().map(|v| 1.0 + 0.3 * v).collect()
        } else {
            continue;
        };
        t.assign(&data).unwrap();
    }
}

fn check<L: Module + Forward>(mut m: WithInput<L>, rng: &mut ChaCha8Rng, opts: &GradCheckOptions) -> GradCheckReport {
    randomize_bn(&mut m, rng);
    let probe = normal_vec(rng, 4096);
    grad_check(
        &mut m,
        |m, tape| {
            let x = tape.leaf(&m.input);
            let y = forward(&mut m.layer, tape, x)?;
            let n: usize = tape.shape(y).iter().product();
            projection(tape, y, &probe[..n])
        },
        opts,
    )
    .unwrap()
}

/// Uniform forward over the layer types under test.
pub trait Forward {
    fn fwd(&mut self, tape: &mut Tape, x: Var) -> Result<Var>;
}

fn forward<L: Forward>(l: &mut L, tape: &mut Tape, x: Var) -> Result<Var> {
    l.fwd(tape, x)
}

impl Forward for Conv1dLayer {
    fn fwd(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward(tape, x)
    }
}

impl Forward for BatchNorm1dLayer {
    fn fwd(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward(tape, x)
    }
}

impl Forward for LinearLayer {
    fn fwd(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward(tape, x)
    }
}

impl Forward for Cbam {
    fn fwd(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward(tape, x)
    }
}

impl Forward for Res2NetBlock {
    fn fwd(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.forward(tape, x)
    }
}

/// Max pooling (kernel 3, stride 2, padding 1) has no parameters.
pub struct MaxPool;

impl Parameterized for MaxPool {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        Vec::new()
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        Vec::new()
    }
}

impl Module for MaxPool {}

impl Forward for MaxPool {
    fn fwd(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        maxpool1d(tape, x, 3, 2, 1)
    }
}

pub fn conv(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let layer = Conv1dLayer::new(3, 4, 5, 2, 2, true, &mut r).unwrap();
    check(WithInput::new(layer, &[2, 3, 11], &mut r, Mode::Train), &mut r, &GradCheckOptions::with_tolerance(LAYER_TOLERANCE))
}

pub fn batchnorm_eval(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    check(WithInput::new(BatchNorm1dLayer::new(4), &[3, 4, 6], &mut r, Mode::Eval), &mut r, &GradCheckOptions::with_tolerance(LAYER_TOLERANCE))
}

pub fn batchnorm_train(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    check(WithInput::new(BatchNorm1dLayer::new(4), &[3, 4, 6], &mut r, Mode::Train), &mut r, &GradCheckOptions::with_tolerance(LAYER_TOLERANCE))
}

pub fn maxpool(seed: u64) -> GradCheckReport {
    maxpool_with(seed, &GradCheckOptions::with_tolerance(LAYER_TOLERANCE))
}

pub fn maxpool_with(seed: u64, opts: &GradCheckOptions) -> GradCheckReport {
    let mut r = rng(seed);
    check(WithInput::new(MaxPool, &[2, 3, 9], &mut r, Mode::Train), &mut r, opts)
}

pub fn linear(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let layer = LinearLayer::new(5, 3, &mut r).unwrap();
    check(WithInput::new(layer, &[4, 5], &mut r, Mode::Train), &mut r, &GradCheckOptions::with_tolerance(LAYER_TOLERANCE))
}

pub fn cbam(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let mut layer = Cbam::with_reduction(8, 4, &mut r).unwrap();
    // Non-zero biases so the hidden ReLU and sigmoids see varied inputs,
    // small enough that the gates stay out of saturation.
    for (name, t) in layer.named_params_mut() {
        if name.ends_with("bias") {
            let n = t.numel();
            let b: Vec<f64> = normal_vec(&mut r, n).iter().map(|v| 0.3 * v).collect();
            t.assign(&b).unwrap();
        }
    }
    check(WithInput::new(layer, &[2, 8, 10], &mut r, Mode::Train), &mut r, &GradCheckOptions::with_tolerance(LAYER_TOLERANCE))
}

/// Downsampling block with a projection shortcut, BN in eval mode.
pub fn res2net_down(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let layer = Res2NetBlock::new(8, 8, 16, 2, &mut r).unwrap();
    check(WithInput::new(layer, &[2, 8, 12], &mut r, Mode::Eval), &mut r, &GradCheckOptions::with_tolerance(LAYER_TOLERANCE))
}

/// Identity-shortcut block with the hierarchical segment sums.
pub fn res2net_identity(seed: u64) -> GradCheckReport {
    let mut r = rng(seed);
    let layer = Res2NetBlock::new(16, 8, 16, 1, &mut r).unwrap();
    check(WithInput::new(layer, &[2, 16, 10], &mut r, Mode::Eval), &mut r, &GradCheckOptions::with_tolerance(LAYER_TOLERANCE))
}

/// Tiny network (N = 64) through MSE on a random batch, 24 sampled elements.
pub fn tiny_net(seed: u64) -> GradCheckReport {
    let cfg = VeloNetConfig { rng_seed: seed, dropout_rate: 0.0, ..VeloNetConfig::tiny(64) };
    let net = VeloNet::build(&cfg).unwrap();
    let opts = GradCheckOptions { tolerance: NET_TOLERANCE, sample: Some((10, seed)), ..Default::default() };
    gradcheck_network(&net, 2, seed, &opts).unwrap()
}

pub type LayerCheck = (&'static str, fn(u64) -> GradCheckReport);

pub const LAYER_CHECKS: &[LayerCheck] = &[
    ("conv1d", conv),
    ("batchnorm (eval)", batchnorm_eval),
    ("maxpool", maxpool),
    ("linear", linear),
    ("cbam", cbam),
    ("res2net (downsampling)", res2net_down),
    ("res2net (identity)", res2net_identity),
];
