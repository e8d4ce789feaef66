//! Absolute and relative translation error.

use std::io::Write;

use crate::error::{ensure, Result};
use crate::odometry::Trajectory;

pub const DEFAULT_RTE_INTERVAL: f64 = 60.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricResult {
    pub ate: f64,
    pub rte: f64,
    pub n: usize,
    pub rte_interval: f64,
}

fn check_aligned(pred: &Trajectory, gt: &Trajectory) -> Result<()> {
    ensure!(
        pred.len() == gt.len(),
        "trajectories differ in length: pred {}, gt {}",
        pred.len(),
        gt.len()
    );
    for (i, (a, b)) in pred.timestamps.iter().zip(&gt.timestamps).enumerate() {
        ensure!(
            (a - b).abs() <= 1e-9 * a.abs().max(1.0),
            "timestamps disagree at index {i}: pred {a}, gt {b}"
        );
    }
    Ok(())
}

/// Root mean squared position error.
pub fn ate(pred: &Trajectory, gt: &Trajectory) -> Result<f64> {
    check_aligned(pred, gt)?;
    let sq: f64 = (0..pred.len())
        .map(|i| (pred.px[i] - gt.px[i]).powi(2) + (pred.py[i] - gt.py[i]).powi(2))
        .sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// Number of samples spanning `interval` at the trajectory's mean rate.
pub fn rte_lag(timestamps: &[f64], interval: f64) -> usize {
    let n = timestamps.len();
    let mean_dt = (timestamps[n - 1] - timestamps[0]) / (n - 1) as f64;
    ((interval / mean_dt).round() as usize).clamp(1, n - 1)
}

/// Root mean squared error of displacements over `interval` seconds,
/// sliding over every start index. Sequences shorter than the interval use
/// their end-to-end displacement error scaled by `interval / duration`.
pub fn rte(pred: &Trajectory, gt: &Trajectory, interval: f64) -> Result<f64> {
    check_aligned(pred, gt)?;
    ensure!(interval > 0.0, "RTE interval must be positive, got {interval}");
    let n = pred.len();
    ensure!(n >= 2, "RTE needs at least 2 samples, got {n}");
    let disp_err = |i: usize, j: usize| {
        let ex = (pred.px[j] - pred.px[i]) - (gt.px[j] - gt.px[i]);
        let ey = (pred.py[j] - pred.py[i]) - (gt.py[j] - gt.py[i]);
        ex.hypot(ey)
    };
    let duration = gt.timestamps[n - 1] - gt.timestamps[0];
    ensure!(duration > 0.0, "RTE needs a positive duration");
    if duration < interval {
        return Ok(disp_err(0, n - 1) * interval / duration);
    }
    let k = rte_lag(&gt.timestamps, interval);
    let m = n - k;
    let sq: f64 = (0..m).map(|i| disp_err(i, i + k).powi(2)).sum();
    Ok((sq / m as f64).sqrt())
}

pub fn evaluate(pred: &Trajectory, gt: &Trajectory, interval: f64) -> Result<MetricResult> {
    Ok(MetricResult { ate: ate(pred, gt)?, rte: rte(pred, gt, interval)?, n: pred.len(), rte_interval: interval })
}

/// Writes `sequence_id,ate_m,rte_m,n` rows.
pub fn write_report<W: Write>(writer: W, rows: &[(String, MetricResult)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["sequence_id", "ate_m", "rte_m", "n"])?;
    for (id, r) in rows {
        w.write_record([id.clone(), r.ate.to_string(), r.rte.to_string(), r.n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
