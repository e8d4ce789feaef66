//! MSE loss, Adam, reduce-on-plateau scheduling and the fit loop.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataio::WindowedDataset;
use crate::error::{ensure, Error, Result};
use crate::nn::{Mode, Module};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, Parameterized, Tape, Tensor, Var};
use crate::velonet::VeloNet;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// A validation loss counts as an improvement only if it is below the
    /// best so far by more than this.
    pub plateau_threshold: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub rng_seed: u64,
    /// Rotate each training window and its target by a random yaw.
    pub augment_yaw: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 128,
            max_epochs: 200,
            plateau_patience: 10,
            plateau_factor: 0.1,
            plateau_threshold: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            rng_seed: 0,
            augment_yaw: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.learning_rate >= 0.0 && self.learning_rate.is_finite(), "learning_rate must be non-negative");
        ensure!(self.batch_size >= 1, "batch_size must be positive");
        ensure!(self.plateau_patience >= 1, "plateau_patience must be at least 1");
        ensure!(
            self.plateau_factor > 0.0 && self.plateau_factor < 1.0,
            "plateau_factor must lie in (0, 1), got {}",
            self.plateau_factor
        );
        ensure!(self.plateau_threshold >= 0.0, "plateau_threshold must be non-negative");
        ensure!(
            (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2),
            "Adam betas must lie in [0, 1)"
        );
        ensure!(self.adam_epsilon > 0.0, "adam_epsilon must be positive");
        Ok(())
    }
}

/// `(1/B)·Σ_i ‖pred_i − target_i‖²` over `[B, 2]` inputs.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let (ps, ts) = (tape.shape(pred).to_vec(), tape.shape(target).to_vec());
    ensure!(ps == ts, "mse_loss: prediction shape {ps:?} differs from target shape {ts:?}");
    ensure!(ps.len() == 2, "mse_loss: expected [B, D] inputs, got {ps:?}");
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    let total = tape.sum(sq, None)?;
    Ok(tape.scale(total, 1.0 / ps[0] as f64))
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One bias-corrected Adam update of every trainable tensor from its
    /// accumulated gradient (missing gradients count as zero). Nothing is
    /// modified if any gradient is non-finite.
    pub fn step<M: Parameterized + ?Sized>(&mut self, model: &mut M, lr: f64, cfg: &TrainConfig) -> Result<()> {
        let mut params = model.named_params_mut();
        for (name, p) in &params {
            if let Some(g) = p.grad() {
                if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {name}[{i}] is {}", g[i])));
                }
            }
        }
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            ensure!(m.len() == n, "Adam state for {name} has {} entries, parameter has {n}", m.len());
            let g = p.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
            let data = p.data_mut();
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                data[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    pub best: Option<f64>,
    /// Consecutive non-improving epochs since the best or the last drop.
    pub stagnant: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauScheduler {
            lr: cfg.learning_rate,
            factor: cfg.plateau_factor,
            patience: cfg.plateau_patience,
            threshold: cfg.plateau_threshold,
            best: None,
            stagnant: 0,
        }
    }

    /// Records one epoch's validation loss and returns the learning rate
    /// for the next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        match self.best {
            Some(best) if val_loss >= best - self.threshold => {
                self.stagnant += 1;
                if self.stagnant >= self.patience {
                    self.lr *= self.factor;
                    self.stagnant = 0;
                }
            }
            _ => {
                self.best = Some(val_loss);
                self.stagnant = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Rate used during this epoch.
    pub lr: f64,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainReport {
    pub fn min_train_loss(&self) -> f64 {
        self.epochs.iter().map(|e| e.train_loss).fold(f64::INFINITY, f64::min)
    }

    /// `epoch,train_loss,val_loss,lr`; wall-clock is left out so reports of
    /// identical runs are identical files.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "train_loss", "val_loss", "lr"])?;
        for e in &self.epochs {
            w.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.val_loss.to_string(), e.lr.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Rotates the horizontal force and rate rows of every window in `x`
/// (`[B, 6, N]`) and the matching target row by its own angle.
pub fn rotate_yaw(x: &mut Tensor, y: &mut Tensor, angles: &[f64]) -> Result<()> {
    let s = x.shape().to_vec();
    ensure!(s.len() == 3 && s[1] == 6, "rotate_yaw: expected [B, 6, N] inputs, got {s:?}");
    ensure!(y.shape() == [s[0], 2], "rotate_yaw: expected [B, 2] targets, got {:?}", y.shape());
    ensure!(angles.len() == s[0], "rotate_yaw: {} angles for {} windows", angles.len(), s[0]);
    let n = s[2];
    let xd = x.data_mut();
    for (b, &th) in angles.iter().enumerate() {
        let (sn, cs) = th.sin_cos();
        let base = b * 6 * n;
        for (rx, ry) in [(0, 1), (3, 4)] {
            for k in 0..n {
                let (i, j) = (base + rx * n + k, base + ry * n + k);
                let (u, v) = (xd[i], xd[j]);
                xd[i] = cs * u - sn * v;
                xd[j] = sn * u + cs * v;
            }
        }
    }
    let yd = y.data_mut();
    for (b, &th) in angles.iter().enumerate() {
        let (sn, cs) = th.sin_cos();
        let (u, v) = (yd[2 * b], yd[2 * b + 1]);
        yd[2 * b] = cs * u - sn * v;
        yd[2 * b + 1] = sn * u + cs * v;
    }
    Ok(())
}

/// Splits a permutation into batches. A trailing batch of one window is
/// folded into the previous batch: batch statistics need two values.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("non-empty") = &order[start..];
    }
    out
}

fn feed(tape: &mut Tape, t: Tensor) -> Result<Var> {
    let shape = t.shape().to_vec();
    tape.constant(&shape, t.into_data())
}

/// Mean per-window loss over a dataset in eval mode.
pub fn evaluate_loss(net: &mut VeloNet, data: &WindowedDataset, batch_size: usize) -> Result<f64> {
    ensure!(!data.is_empty(), "cannot evaluate an empty dataset");
    let prev = net.mode();
    net.set_mode(Mode::Eval);
    let result = (|| {
        let idx: Vec<usize> = (0..data.len()).collect();
        let mut total = 0.0;
        for chunk in idx.chunks(batch_size.max(1)) {
            let (x, y) = data.batch(chunk)?;
            let mut tape = Tape::new();
            let xv = feed(&mut tape, x)?;
            let yv = feed(&mut tape, y)?;
            let pred = net.forward(&mut tape, xv)?;
            let loss = mse_loss(&mut tape, pred, yv)?;
            total += tape.value(loss)[0] * chunk.len() as f64;
        }
        Ok(total / data.len() as f64)
    })();
    net.set_mode(prev);
    result
}

pub fn fit(net: &mut VeloNet, train: &WindowedDataset, val: &WindowedDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    fit_with_progress(net, train, val, cfg, |_| {})
}

/// Trains `net`, calling `progress` after every epoch. On return `net`
/// holds the weights of the epoch with the lowest validation loss.
pub fn fit_with_progress<F: FnMut(&EpochRecord)>(
    net: &mut VeloNet,
    train: &WindowedDataset,
    val: &WindowedDataset,
    cfg: &TrainConfig,
    mut progress: F,
) -> Result<TrainReport> {
    cfg.validate()?;
    ensure!(!train.is_empty(), "training set is empty");
    ensure!(!val.is_empty(), "validation set is empty");
    ensure!(
        train.window_n == net.config.window_n && val.window_n == net.config.window_n,
        "dataset windows ({}, {}) do not match the network window {}",
        train.window_n,
        val.window_n,
        net.config.window_n
    );
    let shared: Vec<&str> = train.source_ids().intersection(&val.source_ids()).copied().collect();
    ensure!(shared.is_empty(), "training and validation share sequences {shared:?}");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut adam = AdamState::new();
    let mut sched = PlateauScheduler::new(cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.max_epochs);
    let mut best: Option<(usize, f64, VeloNet)> = None;

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let lr = sched.lr;
        order.shuffle(&mut rng);
        net.set_mode(Mode::Train);
        let mut total = 0.0;
        for (bi, chunk) in batches(&order, cfg.batch_size).into_iter().enumerate() {
            let (mut x, mut y) = train.batch(chunk)?;
            if cfg.augment_yaw {
                let angles: Vec<f64> = (0..chunk.len()).map(|_| rng.random::<f64>() * TAU).collect();
                rotate_yaw(&mut x, &mut y, &angles)?;
            }
            let mut tape = Tape::new();
            let xv = feed(&mut tape, x)?;
            let yv = feed(&mut tape, y)?;
            let pred = net.forward(&mut tape, xv)?;
            let loss = mse_loss(&mut tape, pred, yv)?;
            let value = tape.value(loss)[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss {value} at epoch {epoch}, batch {bi}")));
            }
            tape.backward(loss)?;
            net.zero_grad();
            net.collect_grads(&tape)?;
            adam.step(net, lr, cfg)?;
            total += value * chunk.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let val_loss = evaluate_loss(net, val, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {val_loss} at epoch {epoch}")));
        }
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, net.clone()));
        }
        sched.step(val_loss);
        let record = EpochRecord { epoch, train_loss, val_loss, lr, wall_clock_s: started.elapsed().as_secs_f64() };
        progress(&record);
        epochs.push(record);
    }
    net.zero_grad();
    let (best_epoch, best_val_loss) = match best {
        Some((e, v, best_net)) => {
            *net = best_net;
            net.zero_grad();
            (e, v)
        }
        None => (0, f64::NAN),
    };
    net.set_mode(Mode::Eval);
    Ok(TrainReport { epochs, best_epoch, best_val_loss })
}

const CALIBRATION_PASSES: usize = 64;

/// Finite-difference check of the MSE gradient of `net` in eval mode on a
/// random batch of standard-normal inputs and targets.
///
/// The check runs on a copy whose BatchNorm running statistics are first
/// fitted to the check batch by repeated train-mode forwards. With the
/// initial statistics activations grow layer by layer and the attention
/// gates saturate, leaving gradients below finite-difference resolution.
pub fn gradcheck_network(
    net: &VeloNet,
    batch: usize,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    ensure!(batch >= 1, "gradcheck batch must be positive");
    let n = net.config.window_n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.sample(StandardNormal)).collect() };
    let x = normal(batch * 6 * n);
    let y = normal(batch * 2);
    let mut net = net.clone();
    net.set_mode(Mode::Train);
    for _ in 0..CALIBRATION_PASSES {
        let mut tape = Tape::new();
        let xv = tape.constant(&[batch, 6, n], x.clone())?;
        net.forward(&mut tape, xv)?;
    }
    net.set_mode(Mode::Eval);
    grad_check(
        &mut net,
        |net, tape| {
            let xv = tape.constant(&[batch, 6, n], x.clone())?;
            let yv = tape.constant(&[batch, 2], y.clone())?;
            let pred = net.forward(tape, xv)?;
            mse_loss(tape, pred, yv)
        },
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mse_of(pred: &[f64], target: &[f64], b: usize) -> f64 {
        let mut tape = Tape::new();
        let p = tape.constant(&[b, 2], pred.to_vec()).unwrap();
        let t = tape.constant(&[b, 2], target.to_vec()).unwrap();
        let l = mse_loss(&mut tape, p, t).unwrap();
        tape.value(l)[0]
    }

    #[test]
    fn mse_trivial_cases() {
        assert_eq!(mse_of(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0], 2), 0.0);
        assert_eq!(mse_of(&[1.0, 0.0, 2.0, 5.0], &[0.0, 0.0, 1.0, 5.0], 2), 1.0);
    }

    #[test]
    fn mse_shape_mismatch() {
        let mut tape = Tape::new();
        let p = tape.constant(&[2, 2], vec![0.0; 4]).unwrap();
        let t = tape.constant(&[1, 2], vec![0.0; 2]).unwrap();
        assert!(mse_loss(&mut tape, p, t).is_err());
    }

    #[test]
    fn scheduler_drops_after_patience() {
        let mut s = PlateauScheduler::new(&TrainConfig::default());
        assert_eq!(s.step(1.0), 1e-3);
        for _ in 0..9 {
            assert_eq!(s.step(1.0), 1e-3);
        }
        assert!((s.step(1.0) - 1e-4).abs() < 1e-18);
        assert_eq!(s.stagnant, 0);
    }

    #[test]
    fn improvement_resets_counter() {
        let mut s = PlateauScheduler::new(&TrainConfig::default());
        s.step(1.0);
        for _ in 0..9 {
            s.step(1.5);
        }
        assert_eq!(s.step(0.9), 1e-3);
        for _ in 0..9 {
            assert_eq!(s.step(0.9), 1e-3);
        }
        assert!(s.step(0.95) < 1e-3);
    }

    #[test]
    fn batching_folds_a_lone_tail() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1], &[4, 5, 6, 7, 8]);
        assert_eq!(batches(&order, 3).len(), 3);
        assert_eq!(batches(&order[..1], 4), vec![&[0][..]]);
    }

    #[test]
    fn yaw_rotation_moves_x_to_y() {
        let n = 2;
        let mut x = Tensor::new(&[1, 6, n], vec![1.0, 1.0, 0.0, 0.0, 9.8, 9.8, 0.5, 0.5, 0.0, 0.0, 0.1, 0.1]).unwrap();
        let mut y = Tensor::new(&[1, 2], vec![2.0, 0.0]).unwrap();
        rotate_yaw(&mut x, &mut y, &[std::f64::consts::FRAC_PI_2]).unwrap();
        let d = x.data();
        assert!(d[0].abs() < 1e-15 && (d[2] - 1.0).abs() < 1e-15 && d[4] == 9.8);
        assert!(d[6].abs() < 1e-15 && (d[8] - 0.5).abs() < 1e-15 && d[10] == 0.1);
        assert!(y.data()[0].abs() < 1e-15 && (y.data()[1] - 2.0).abs() < 1e-15);
    }
}
