//! 1D Res2Net bottleneck block.
//!
//! The reduced feature map is split channel-wise into `scale` equal
//! segments. Every segment has its own 3-tap convolution, and from the
//! second segment on its input is the segment itself plus the previous
//! segment's output, so later segments see progressively wider receptive
//! fields. The segment outputs are concatenated, fused by a pointwise
//! convolution, and added to the shortcut.

use rand::Rng;

use crate::error::{ensure, Result};
use crate::nn::{BatchNorm1dLayer, Conv1dLayer, Mode, Module};
use crate::tensor::{prefixed, Parameterized, Tape, Tensor, Var};

pub const DEFAULT_SCALE: usize = 4;

#[derive(Debug, Clone)]
pub struct Shortcut {
    pub conv: Conv1dLayer,
    pub bn: BatchNorm1dLayer,
}

#[derive(Debug, Clone)]
pub struct Res2NetBlock {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub scale: usize,
    pub stride: usize,
    pub reduce_conv: Conv1dLayer,
    pub reduce_bn: BatchNorm1dLayer,
    pub segment_convs: Vec<Conv1dLayer>,
    pub segment_bns: Vec<BatchNorm1dLayer>,
    pub fuse_conv: Conv1dLayer,
    pub fuse_bn: BatchNorm1dLayer,
    /// `None` is the identity shortcut.
    pub shortcut: Option<Shortcut>,
}

impl Res2NetBlock {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        mid_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::with_scale(in_channels, mid_channels, out_channels, stride, DEFAULT_SCALE, rng)
    }

    pub fn with_scale<R: Rng + ?Sized>(
        in_channels: usize,
        mid_channels: usize,
        out_channels: usize,
        stride: usize,
        scale: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(scale >= 1, "res2net: scale must be positive");
        ensure!(
            mid_channels % scale == 0 && mid_channels >= scale,
            "res2net: mid_channels {mid_channels} not divisible into {scale} segments"
        );
        ensure!(stride >= 1, "res2net: stride must be positive");
        let width = mid_channels / scale;
        let reduce_conv = Conv1dLayer::new(in_channels, mid_channels, 1, 1, 0, false, rng)?;
        let segment_convs = (0..scale)
            .map(|_| Conv1dLayer::new(width, width, 3, stride, 1, false, rng))
            .collect::<Result<Vec<_>>>()?;
        let fuse_conv = Conv1dLayer::new(mid_channels, out_channels, 1, 1, 0, false, rng)?;
        let shortcut = if stride != 1 || in_channels != out_channels {
            Some(Shortcut {
                conv: Conv1dLayer::new(in_channels, out_channels, 1, stride, 0, false, rng)?,
                bn: BatchNorm1dLayer::new(out_channels),
            })
        } else {
            None
        };
        Ok(Res2NetBlock {
            in_channels,
            mid_channels,
            out_channels,
            scale,
            stride,
            reduce_conv,
            reduce_bn: BatchNorm1dLayer::new(mid_channels),
            segment_convs,
            segment_bns: (0..scale).map(|_| BatchNorm1dLayer::new(width)).collect(),
            fuse_conv,
            fuse_bn: BatchNorm1dLayer::new(out_channels),
            shortcut,
        })
    }

    pub fn width(&self) -> usize {
        self.mid_channels / self.scale
    }

    pub fn output_len(&self, len_in: usize) -> Option<usize> {
        self.segment_convs[0].output_len(len_in)
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        ensure!(
            s.len() == 3 && s[1] == self.in_channels,
            "res2net: expected [B, {}, L] input, got {s:?}",
            self.in_channels
        );
        let u = self.reduce_conv.forward(tape, x)?;
        let u = self.reduce_bn.forward(tape, u)?;
        let u = tape.relu(u);

        let width = self.width();
        let mut outputs: Vec<Var> = Vec::with_capacity(self.scale);
        for i in 0..self.scale {
            let mut seg = tape.narrow(u, 1, i * width, width)?;
            // Downsampling blocks convolve each segment independently: the
            // previous output is already at the reduced resolution.
            if i > 0 && self.stride == 1 {
                seg = tape.add(seg, outputs[i - 1])?;
            }
            let y = self.segment_convs[i].forward(tape, seg)?;
            let y = self.segment_bns[i].forward(tape, y)?;
            outputs.push(tape.relu(y));
        }
        let cat = tape.concat(&outputs, 1)?;
        let fused = self.fuse_conv.forward(tape, cat)?;
        let fused = self.fuse_bn.forward(tape, fused)?;

        let residual = match &mut self.shortcut {
            Some(sc) => {
                let r = sc.conv.forward(tape, x)?;
                sc.bn.forward(tape, r)?
            }
            None => x,
        };
        ensure!(
            tape.shape(fused) == tape.shape(residual),
            "res2net: branch shape {:?} does not match shortcut shape {:?}",
            tape.shape(fused),
            tape.shape(residual)
        );
        let sum = tape.add(fused, residual)?;
        Ok(tape.relu(sum))
    }
}

impl Parameterized for Res2NetBlock {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("reduce_conv", self.reduce_conv.named_tensors());
        v.extend(prefixed("reduce_bn", self.reduce_bn.named_tensors()));
        for (i, (c, b)) in self.segment_convs.iter().zip(&self.segment_bns).enumerate() {
            v.extend(prefixed(&format!("segment{i}.conv"), c.named_tensors()));
            v.extend(prefixed(&format!("segment{i}.bn"), b.named_tensors()));
        }
        v.extend(prefixed("fuse_conv", self.fuse_conv.named_tensors()));
        v.extend(prefixed("fuse_bn", self.fuse_bn.named_tensors()));
        if let Some(sc) = &self.shortcut {
            v.extend(prefixed("shortcut.conv", sc.conv.named_tensors()));
            v.extend(prefixed("shortcut.bn", sc.bn.named_tensors()));
        }
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed("reduce_conv", self.reduce_conv.named_tensors_mut());
        v.extend(prefixed("reduce_bn", self.reduce_bn.named_tensors_mut()));
        for (i, (c, b)) in self.segment_convs.iter_mut().zip(&mut self.segment_bns).enumerate() {
            v.extend(prefixed(&format!("segment{i}.conv"), c.named_tensors_mut()));
            v.extend(prefixed(&format!("segment{i}.bn"), b.named_tensors_mut()));
        }
        v.extend(prefixed("fuse_conv", self.fuse_conv.named_tensors_mut()));
        v.extend(prefixed("fuse_bn", self.fuse_bn.named_tensors_mut()));
        if let Some(sc) = &mut self.shortcut {
            v.extend(prefixed("shortcut.conv", sc.conv.named_tensors_mut()));
            v.extend(prefixed("shortcut.bn", sc.bn.named_tensors_mut()));
        }
        v
    }
}

impl Module for Res2NetBlock {
    fn set_mode(&mut self, mode: Mode) {
        self.reduce_bn.set_mode(mode);
        self.segment_bns.iter_mut().for_each(|b| b.set_mode(mode));
        self.fuse_bn.set_mode(mode);
        if let Some(sc) = &mut self.shortcut {
            sc.bn.set_mode(mode);
        }
    }
}
