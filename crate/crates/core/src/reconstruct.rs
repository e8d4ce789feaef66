//! Sequence to trajectory: per-window network velocities integrated from
//! the known start position.

use crate::dataio::{navigation_rows, window_input, SequenceRecord, INPUT_ROWS};
use crate::error::{ensure, Result};
use crate::odometry::{integrate_velocity, Trajectory, VelocitySeries};
use crate::tensor::Tensor;
use crate::velonet::VeloNet;

const PREDICT_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub trajectory: Trajectory,
    /// Sequence sample index of every trajectory point.
    pub sample_indices: Vec<usize>,
}

impl Reconstruction {
    /// Ground truth at the reconstructed points, if the sequence has it.
    pub fn ground_truth(&self, seq: &SequenceRecord) -> Option<Trajectory> {
        seq.ground_truth().map(|gt| gt.select(&self.sample_indices))
    }
}

/// Eval-mode velocities of the windows starting at `starts`.
pub fn predict_windows(net: &mut VeloNet, rows: &[[f64; 6]], starts: &[usize]) -> Result<Vec<[f64; 2]>> {
    let n = net.config.window_n;
    let mut out = Vec::with_capacity(starts.len());
    for chunk in starts.chunks(PREDICT_BATCH) {
        let data: Vec<f64> = chunk.iter().flat_map(|&s| window_input(rows, s, n)).collect();
        let x = Tensor::new(&[chunk.len(), INPUT_ROWS, n], data)?;
        out.extend(net.predict(&x)?);
    }
    Ok(out)
}

/// With `stride = None`, window `k` covers samples `[kN, (k+1)N)` and its
/// velocity carries the position from sample `kN` to `(k+1)N`; the
/// trajectory has one point per window boundary. With a smaller stride,
/// overlapping windows are averaged per sample interval and the trajectory
/// has one point per covered sample. The start is the first ground-truth
/// position when available, else the origin.
pub fn reconstruct(net: &mut VeloNet, seq: &SequenceRecord, stride: Option<usize>) -> Result<Reconstruction> {
    let n = net.config.window_n;
    let len = seq.len();
    let rows = navigation_rows(seq);
    let times = seq.timestamps();
    let origin = seq.samples[0].gt_pos.unwrap_or([0.0, 0.0]);

    let (indices, velocities): (Vec<usize>, Vec<[f64; 2]>) = match stride {
        None => {
            let k = (len - 1) / n;
            ensure!(k >= 1, "sequence {:?} has {len} samples; one window needs {}", seq.id, n + 1);
            let starts: Vec<usize> = (0..k).map(|i| i * n).collect();
            let v = predict_windows(net, &rows, &starts)?;
            ((0..=k).map(|i| i * n).collect(), v)
        }
        Some(s) => {
            ensure!(s >= 1 && s <= n, "overlap stride must lie in 1..={n}, got {s}");
            ensure!(len > n, "sequence {:?} has {len} samples; one window needs {}", seq.id, n + 1);
            let starts: Vec<usize> = (0..).map(|i| i * s).take_while(|&st| st + n < len).collect();
            let v = predict_windows(net, &rows, &starts)?;
            let covered = starts.last().expect("at least one window") + n;
            let mut sum = vec![[0.0, 0.0]; covered];
            let mut count = vec![0usize; covered];
            for (&st, vel) in starts.iter().zip(&v) {
                for j in st..st + n {
                    sum[j][0] += vel[0];
                    sum[j][1] += vel[1];
                    count[j] += 1;
                }
            }
            let per_sample = sum.iter().zip(&count).map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64]).collect();
            ((0..=covered).collect(), per_sample)
        }
    };
    let series = VelocitySeries::new(
        times[indices[0]],
        indices[1..].iter().map(|&i| times[i]).collect(),
        velocities.iter().map(|v| v[0]).collect(),
        velocities.iter().map(|v| v[1]).collect(),
    )?;
    let trajectory = integrate_velocity(&series, origin)?;
    Ok(Reconstruction { trajectory, sample_indices: indices })
}
