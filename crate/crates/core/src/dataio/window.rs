use std::collections::BTreeSet;

use super::{rotate, SequenceRecord};
use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

pub const INPUT_ROWS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// `6 × N` row-major; rows are fx, fy, fz, wx, wy, wz.
    pub input: Vec<f64>,
    /// Mean ground-truth horizontal velocity over the window, m/s.
    pub target: [f64; 2],
    pub source: String,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub windows: Vec<Window>,
    pub window_n: usize,
    pub stride: usize,
}

impl WindowedDataset {
    pub fn empty(window_n: usize, stride: usize) -> Self {
        WindowedDataset { windows: Vec::new(), window_n, stride }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Appends another dataset's windows; window lengths must agree.
    pub fn extend(&mut self, other: WindowedDataset) -> Result<()> {
        ensure!(
            other.window_n == self.window_n,
            "cannot merge windows of length {} into a dataset of length {}",
            other.window_n,
            self.window_n
        );
        self.windows.extend(other.windows);
        Ok(())
    }

    pub fn source_ids(&self) -> BTreeSet<&str> {
        self.windows.iter().map(|w| w.source.as_str()).collect()
    }

    /// Stacks the selected windows into `[B, 6, N]` inputs and `[B, 2]` targets.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        ensure!(!indices.is_empty(), "batch needs at least one window");
        let n = self.window_n;
        let mut x = Vec::with_capacity(indices.len() * INPUT_ROWS * n);
        let mut y = Vec::with_capacity(indices.len() * 2);
        for &i in indices {
            let w = self
                .windows
                .get(i)
                .ok_or_else(|| Error::contract(format!("window index {i} out of range ({})", self.len())))?;
            x.extend_from_slice(&w.input);
            y.extend_from_slice(&w.target);
        }
        Ok((Tensor::new(&[indices.len(), INPUT_ROWS, n], x)?, Tensor::new(&[indices.len(), 2], y)?))
    }
}

/// Per-sample `[fx, fy, fz, wx, wy, wz]`, rotated into the navigation frame
/// when the sequence carries orientation and taken as-is otherwise.
pub fn navigation_rows(seq: &SequenceRecord) -> Vec<[f64; 6]> {
    seq.samples
        .iter()
        .map(|s| {
            let (f, w) = match &s.orientation {
                Some(q) => (rotate(q, s.accel), rotate(q, s.gyro)),
                None => (s.accel, s.gyro),
            };
            [f[0], f[1], f[2], w[0], w[1], w[2]]
        })
        .collect()
}

/// Transposes rows `[start, start+n)` into a `6 × n` channel-major block.
pub fn window_input(rows: &[[f64; 6]], start: usize, n: usize) -> Vec<f64> {
    let mut input = vec![0.0; INPUT_ROWS * n];
    for (k, row) in rows[start..start + n].iter().enumerate() {
        for c in 0..INPUT_ROWS {
            input[c * n + k] = row[c];
        }
    }
    input
}

/// Every window `[i, i+N)` with `i = 0, stride, 2·stride, …` that fits.
/// Inputs come from [`navigation_rows`].
pub fn window_dataset(seq: &SequenceRecord, window_n: usize, stride: usize) -> Result<WindowedDataset> {
    ensure!(window_n >= 2, "window_n must be at least 2, got {window_n}");
    ensure!(stride >= 1, "stride must be positive");
    if !seq.has_ground_truth() {
        return Err(Error::Missing(format!("sequence {:?} has no ground-truth positions", seq.id)));
    }
    ensure!(
        seq.len() >= window_n,
        "sequence {:?} has {} samples, shorter than the window {window_n}",
        seq.id,
        seq.len()
    );
    let nav = navigation_rows(seq);
    let mut windows = Vec::new();
    let mut start = 0;
    while start + window_n <= seq.len() {
        let input = window_input(&nav, start, window_n);
        let (a, b) = (&seq.samples[start], &seq.samples[start + window_n - 1]);
        let (pa, pb) = (a.gt_pos.expect("checked"), b.gt_pos.expect("checked"));
        let dt = b.t - a.t;
        windows.push(Window {
            input,
            target: [(pb[0] - pa[0]) / dt, (pb[1] - pa[1]) / dt],
            source: seq.id.clone(),
            start,
        });
        start += stride;
    }
    Ok(WindowedDataset { windows, window_n, stride })
}
