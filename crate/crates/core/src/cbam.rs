//! Convolutional block attention, channel first then spatial.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::nn::{global_pool, Conv1dLayer, LinearLayer, Module, PoolAxis, PoolOp};
use crate::tensor::{prefixed, Parameterized, Tape, Tensor, Var};

pub const DEFAULT_REDUCTION: usize = 16;
pub const SPATIAL_KERNEL: usize = 7;

#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub channels: usize,
    pub hidden: usize,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

impl ChannelAttention {
    /// The hidden width is `channels / reduction`, clamped to at least one.
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        ensure!(channels > 0 && reduction > 0, "channel attention: channels and reduction must be positive");
        let hidden = (channels / reduction).max(1);
        Ok(ChannelAttention {
            channels,
            hidden,
            fc1: LinearLayer::new(channels, hidden, rng)?,
            fc2: LinearLayer::new(hidden, channels, rng)?,
        })
    }

    fn mlp(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, h)
    }

    /// Per-channel weights `[B, C, 1]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        ensure!(
            s.len() == 3 && s[1] == self.channels,
            "channel attention: expected [B, {}, L] input, got {s:?}",
            self.channels
        );
        let (b, c) = (s[0], s[1]);
        let avg = global_pool(tape, x, PoolOp::Avg, PoolAxis::Length)?;
        let avg = tape.reshape(avg, &[b, c])?;
        let max = global_pool(tape, x, PoolOp::Max, PoolAxis::Length)?;
        let max = tape.reshape(max, &[b, c])?;
        let za = self.mlp(tape, avg)?;
        let zm = self.mlp(tape, max)?;
        let z = tape.add(za, zm)?;
        let m = tape.sigmoid(z);
        tape.reshape(m, &[b, c, 1])
    }
}

impl Parameterized for ChannelAttention {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("fc1", self.fc1.named_tensors());
        v.extend(prefixed("fc2", self.fc2.named_tensors()));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed("fc1", self.fc1.named_tensors_mut());
        v.extend(prefixed("fc2", self.fc2.named_tensors_mut()));
        v
    }
}

#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub conv: Conv1dLayer,
}

impl SpatialAttention {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Result<Self> {
        let conv = Conv1dLayer::new(2, 1, SPATIAL_KERNEL, 1, SPATIAL_KERNEL / 2, false, rng)?;
        Ok(SpatialAttention { conv })
    }

    /// Per-position weights `[B, 1, L]`.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        ensure!(s.len() == 3, "spatial attention: expected [B, C, L] input, got {s:?}");
        let avg = global_pool(tape, x, PoolOp::Avg, PoolAxis::Channel)?;
        let max = global_pool(tape, x, PoolOp::Max, PoolAxis::Channel)?;
        let desc = tape.concat(&[avg, max], 1)?;
        let z = self.conv.forward(tape, desc)?;
        Ok(tape.sigmoid(z))
    }
}

impl Parameterized for SpatialAttention {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        prefixed("conv", self.conv.named_tensors())
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        prefixed("conv", self.conv.named_tensors_mut())
    }
}

#[derive(Debug, Clone)]
pub struct Cbam {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
}

impl Cbam {
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Result<Self> {
        Self::with_reduction(channels, DEFAULT_REDUCTION, rng)
    }

    pub fn with_reduction<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        Ok(Cbam { channel: ChannelAttention::new(channels, reduction, rng)?, spatial: SpatialAttention::new(rng)? })
    }

    pub fn channels(&self) -> usize {
        self.channel.channels
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mc = self.channel.forward(tape, x)?;
        let x1 = tape.mul(x, mc)?;
        let ms = self.spatial.forward(tape, x1)?;
        tape.mul(x1, ms)
    }
}

impl Parameterized for Cbam {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("channel", self.channel.named_tensors());
        v.extend(prefixed("spatial", self.spatial.named_tensors()));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed("channel", self.channel.named_tensors_mut());
        v.extend(prefixed("spatial", self.spatial.named_tensors_mut()));
        v
    }
}

impl Module for Cbam {}
