//! Position reconstruction: velocity integration and step-and-heading PDR.

use std::io::{Read, Write};
use std::path::Path;

use crate::dataio::SequenceRecord;
use crate::error::{ensure, Error, Result};

/// Velocities, each standing for the interval that ends at its timestamp.
/// The first interval starts at `start`, where the origin is known.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocitySeries {
    pub start: f64,
    pub timestamps: Vec<f64>,
    pub vx: Vec<f64>,
    pub vy: Vec<f64>,
}

impl VelocitySeries {
    pub fn new(start: f64, timestamps: Vec<f64>, vx: Vec<f64>, vy: Vec<f64>) -> Result<Self> {
        ensure!(!timestamps.is_empty(), "velocity series needs at least one sample");
        ensure!(
            vx.len() == timestamps.len() && vy.len() == timestamps.len(),
            "velocity series lengths differ: t {}, vx {}, vy {}",
            timestamps.len(),
            vx.len(),
            vy.len()
        );
        ensure!(
            start.is_finite() && timestamps.iter().chain(&vx).chain(&vy).all(|v| v.is_finite()),
            "velocity series contains non-finite values"
        );
        let mut prev = start;
        for (i, &t) in timestamps.iter().enumerate() {
            ensure!(t > prev, "velocity timestamps must increase: sample {i} at {t} follows {prev}");
            prev = t;
        }
        Ok(VelocitySeries { start, timestamps, vx, vy })
    }

    /// Infers the start by repeating the first sampling interval backwards.
    pub fn from_samples(timestamps: Vec<f64>, vx: Vec<f64>, vy: Vec<f64>) -> Result<Self> {
        ensure!(
            timestamps.len() >= 2,
            "cannot infer the first interval from {} sample(s); give an explicit start",
            timestamps.len()
        );
        let start = 2.0 * timestamps[0] - timestamps[1];
        Self::new(start, timestamps, vx, vy)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub timestamps: Vec<f64>,
    pub px: Vec<f64>,
    pub py: Vec<f64>,
}

impl Trajectory {
    pub fn new(timestamps: Vec<f64>, px: Vec<f64>, py: Vec<f64>) -> Result<Self> {
        ensure!(!timestamps.is_empty(), "trajectory needs at least one point");
        ensure!(
            px.len() == timestamps.len() && py.len() == timestamps.len(),
            "trajectory lengths differ: t {}, px {}, py {}",
            timestamps.len(),
            px.len(),
            py.len()
        );
        ensure!(
            timestamps.iter().chain(&px).chain(&py).all(|v| v.is_finite()),
            "trajectory contains non-finite values"
        );
        Ok(Trajectory { timestamps, px, py })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn position(&self, i: usize) -> [f64; 2] {
        [self.px[i], self.py[i]]
    }

    pub fn last(&self) -> [f64; 2] {
        self.position(self.len() - 1)
    }

    /// Sum of segment lengths.
    pub fn path_length(&self) -> f64 {
        (1..self.len())
            .map(|i| (self.px[i] - self.px[i - 1]).hypot(self.py[i] - self.py[i - 1]))
            .sum()
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Trajectory {
        Trajectory {
            timestamps: self.timestamps.clone(),
            px: self.px.iter().map(|p| p + dx).collect(),
            py: self.py.iter().map(|p| p + dy).collect(),
        }
    }

    /// Points at the given indices.
    pub fn select(&self, indices: &[usize]) -> Trajectory {
        Trajectory {
            timestamps: indices.iter().map(|&i| self.timestamps[i]).collect(),
            px: indices.iter().map(|&i| self.px[i]).collect(),
            py: indices.iter().map(|&i| self.py[i]).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "px", "py"])?;
        for i in 0..self.len() {
            w.write_record([self.timestamps[i].to_string(), self.px[i].to_string(), self.py[i].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: Read>(reader: R, path: &Path) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = r.headers()?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                message: format!("missing column {name:?}"),
            })
        };
        let (ct, cx, cy) = (col("t")?, col("px")?, col("py")?);
        let (mut t, mut px, mut py) = (Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = rec.position().map_or(row as u64 + 2, |p| p.line());
            let field = |c: usize| -> Result<f64> {
                let raw = rec.get(c).unwrap_or("");
                raw.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("row {}: {:?} is not a number", row + 1, raw),
                })
            };
            t.push(field(ct)?);
            px.push(field(cx)?);
            py.push(field(cy)?);
        }
        Trajectory::new(t, px, py)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?, path)
    }
}

/// `p_i = p_0 + Σ_{j≤i} v_j·Δt_j`. The result has one more point than
/// the series: the origin at `v.start`, then one point per velocity sample.
pub fn integrate_velocity(v: &VelocitySeries, origin: [f64; 2]) -> Result<Trajectory> {
    let n = v.len();
    let mut t = Vec::with_capacity(n + 1);
    let mut px = Vec::with_capacity(n + 1);
    let mut py = Vec::with_capacity(n + 1);
    t.push(v.start);
    px.push(origin[0]);
    py.push(origin[1]);
    let mut prev = v.start;
    for j in 0..n {
        let dt = v.timestamps[j] - prev;
        ensure!(dt > 0.0, "non-increasing velocity timestamp at sample {j}");
        px.push(px[j] + v.vx[j] * dt);
        py.push(py[j] + v.vy[j] * dt);
        t.push(v.timestamps[j]);
        prev = v.timestamps[j];
    }
    Trajectory::new(t, px, py)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdrConfig {
    pub step_length: f64,
    /// On the accelerometer magnitude, gravity included.
    pub accel_peak_threshold: f64,
    pub min_step_interval: f64,
    pub smoothing_window: usize,
}

impl Default for PdrConfig {
    fn default() -> Self {
        PdrConfig { step_length: 0.67, accel_peak_threshold: 10.5, min_step_interval: 0.3, smoothing_window: 15 }
    }
}

impl PdrConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.step_length > 0.0, "step_length must be positive");
        ensure!(self.min_step_interval > 0.0, "min_step_interval must be positive");
        ensure!(self.smoothing_window >= 1, "smoothing_window must be at least 1");
        Ok(())
    }
}

/// Centered moving average; the window shrinks at the edges.
fn smooth(x: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let mut prefix = vec![0.0; x.len() + 1];
    for (i, v) in x.iter().enumerate() {
        prefix[i + 1] = prefix[i] + v;
    }
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window - half).min(x.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Timestamps of steps: local maxima of the smoothed magnitude above the
/// threshold. A peak closer than `min_step_interval` to the last accepted
/// step is dropped.
pub fn detect_steps(accel_magnitude: &[f64], timestamps: &[f64], config: &PdrConfig) -> Result<Vec<f64>> {
    config.validate()?;
    ensure!(
        accel_magnitude.len() == timestamps.len(),
        "detect_steps: {} magnitudes but {} timestamps",
        accel_magnitude.len(),
        timestamps.len()
    );
    if accel_magnitude.len() < config.smoothing_window.max(3) {
        return Ok(Vec::new());
    }
    let s = smooth(accel_magnitude, config.smoothing_window);
    let mut steps: Vec<f64> = Vec::new();
    for i in 1..s.len() - 1 {
        // Plateaus count once, at their first sample.
        let is_peak = s[i] > s[i - 1] && s[i] >= s[i + 1];
        if !is_peak || s[i] <= config.accel_peak_threshold {
            continue;
        }
        if steps.last().is_none_or(|&last| timestamps[i] - last >= config.min_step_interval) {
            steps.push(timestamps[i]);
        }
    }
    Ok(steps)
}

/// Yaw of a device-to-navigation quaternion `(w, x, y, z)`.
pub fn yaw_of(q: [f64; 4]) -> f64 {
    let [w, x, y, z] = q;
    (2.0 * (w * z + x * y)).atan2(1.0 - 2.0 * (y * y + z * z))
}

/// Step-and-heading dead reckoning: a fixed stride along the orientation's
/// yaw at every detected step.
pub fn pdr_track(seq: &SequenceRecord, config: &PdrConfig) -> Result<Trajectory> {
    config.validate()?;
    let samples = &seq.samples;
    ensure!(!samples.is_empty(), "pdr: sequence {:?} is empty", seq.id);
    if samples.iter().any(|s| s.orientation.is_none()) {
        return Err(Error::Missing(format!("pdr: sequence {:?} has no orientation stream", seq.id)));
    }
    let mags: Vec<f64> = samples.iter().map(|s| s.accel.iter().map(|a| a * a).sum::<f64>().sqrt()).collect();
    let times: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let steps = detect_steps(&mags, &times, config)?;

    let origin = samples[0].gt_pos.unwrap_or([0.0, 0.0]);
    let mut t = vec![samples[0].t];
    let mut px = vec![origin[0]];
    let mut py = vec![origin[1]];
    let mut cursor = 0;
    for st in steps {
        while cursor + 1 < samples.len() && samples[cursor + 1].t <= st {
            cursor += 1;
        }
        let q = samples[cursor].orientation.expect("checked above");
        let yaw = yaw_of([q.w, q.i, q.j, q.k]);
        let (x, y) = (*px.last().expect("non-empty"), *py.last().expect("non-empty"));
        t.push(st);
        px.push(x + config.step_length * yaw.cos());
        py.push(y + config.step_length * yaw.sin());
    }
    Trajectory::new(t, px, py)
}
