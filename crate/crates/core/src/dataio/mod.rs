//! IMU sequences: the canonical CSV format, navigation-frame rotation,
//! training windows, and a synthetic walker.
//!
//! Canonical columns are `t,gx,gy,gz,ax,ay,az,qw,qx,qy,qz,px,py`: seconds,
//! device-frame angular rate (rad/s) and specific force (m/s², gravity
//! included), the device-to-navigation orientation quaternion, and optional
//! ground-truth horizontal position in meters. The quaternion columns may
//! also be omitted for data already in the navigation frame.

mod synth;
mod window;

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::error::{ensure, Error, Result};

pub use synth::{synthesize, PathType, SyntheticConfig, SyntheticSequence, GRAVITY};
pub use window::{navigation_rows, window_dataset, window_input, Window, WindowedDataset, INPUT_ROWS};

/// How far from unit norm a stored quaternion may be before it is rejected
/// rather than renormalized.
pub const QUATERNION_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: [f64; 3],
    pub accel: [f64; 3],
    /// Rotates device-frame vectors into the navigation frame.
    pub orientation: Option<UnitQuaternion<f64>>,
    pub gt_pos: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub id: String,
    pub samples: Vec<ImuSample>,
    /// Nominal rate from the first and last timestamps.
    pub sample_rate: f64,
}

impl SequenceRecord {
    pub fn new(id: impl Into<String>, samples: Vec<ImuSample>) -> Result<Self> {
        let id = id.into();
        ensure!(samples.len() >= 2, "sequence {id:?} needs at least 2 samples, got {}", samples.len());
        for (i, w) in samples.windows(2).enumerate() {
            ensure!(
                w[1].t > w[0].t,
                "sequence {id:?}: timestamp at sample {} ({}) does not exceed the previous ({})",
                i + 1,
                w[1].t,
                w[0].t
            );
        }
        let has_q = samples[0].orientation.is_some();
        let has_p = samples[0].gt_pos.is_some();
        ensure!(
            samples.iter().all(|s| s.orientation.is_some() == has_q && s.gt_pos.is_some() == has_p),
            "sequence {id:?}: orientation and ground truth must be present for all samples or none"
        );
        ensure!(
            samples.iter().all(|s| {
                s.t.is_finite()
                    && s.gyro.iter().chain(&s.accel).all(|v| v.is_finite())
                    && s.gt_pos.is_none_or(|p| p.iter().all(|v| v.is_finite()))
            }),
            "sequence {id:?} contains non-finite values"
        );
        let n = samples.len();
        let sample_rate = (n - 1) as f64 / (samples[n - 1].t - samples[0].t);
        Ok(SequenceRecord { id, samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_orientation(&self) -> bool {
        self.samples[0].orientation.is_some()
    }

    pub fn has_ground_truth(&self) -> bool {
        self.samples[0].gt_pos.is_some()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn duration(&self) -> f64 {
        self.samples[self.len() - 1].t - self.samples[0].t
    }

    /// Ground truth as a trajectory, if present.
    pub fn ground_truth(&self) -> Option<crate::odometry::Trajectory> {
        let pos: Option<Vec<[f64; 2]>> = self.samples.iter().map(|s| s.gt_pos).collect();
        let pos = pos?;
        crate::odometry::Trajectory::new(
            self.timestamps(),
            pos.iter().map(|p| p[0]).collect(),
            pos.iter().map(|p| p[1]).collect(),
        )
        .ok()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t", "gx", "gy", "gz", "ax", "ay", "az"];
        if self.has_orientation() {
            header.extend(["qw", "qx", "qy", "qz"]);
        }
        if self.has_ground_truth() {
            header.extend(["px", "py"]);
        }
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row: Vec<f64> = vec![s.t];
            row.extend(s.gyro);
            row.extend(s.accel);
            if let Some(q) = s.orientation {
                row.extend([q.w, q.i, q.j, q.k]);
            }
            if let Some(p) = s.gt_pos {
                row.extend(p);
            }
            w.write_record(row.iter().map(f64::to_string))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Reads a sequence in the canonical CSV format. `path` names the source in
/// errors and its file stem becomes the sequence id.
pub fn read_sequence<R: Read>(reader: R, path: &Path) -> Result<SequenceRecord> {
    let parse_err = |line: u64, message: String| Error::Parse { path: path.to_path_buf(), line, message };
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = r.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let required = ["t", "gx", "gy", "gz", "ax", "ay", "az"];
    let mut base = Vec::new();
    for name in required {
        base.push(find(name).ok_or_else(|| parse_err(1, format!("missing column {name:?}")))?);
    }
    let optional_group = |names: &[&str]| -> Result<Option<Vec<usize>>> {
        let found: Vec<Option<usize>> = names.iter().map(|n| find(n)).collect();
        match (found.iter().all(Option::is_some), found.iter().any(Option::is_some)) {
            (true, _) => Ok(Some(found.into_iter().flatten().collect())),
            (false, false) => Ok(None),
            (false, true) => Err(parse_err(1, format!("columns {names:?} must appear together"))),
        }
    };
    let quat_cols = optional_group(&["qw", "qx", "qy", "qz"])?;
    let pos_cols = optional_group(&["px", "py"])?;

    let mut samples: Vec<ImuSample> = Vec::new();
    for (idx, rec) in r.records().enumerate() {
        let row = idx + 1;
        let rec = rec?;
        let line = rec.position().map_or(row as u64 + 1, |p| p.line());
        let num = |c: usize| -> Result<f64> {
            let raw = rec.get(c).unwrap_or("");
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(line, format!("row {row}: column {:?} value {raw:?} is not a number", &headers[c])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("row {row}: column {:?} is not finite", &headers[c])));
            }
            Ok(v)
        };
        let t = num(base[0])?;
        if let Some(prev) = samples.last() {
            if t <= prev.t {
                return Err(parse_err(line, format!("row {row}: time {t} does not exceed previous {}", prev.t)));
            }
        }
        let orientation = match &quat_cols {
            Some(c) => {
                let q = Quaternion::new(num(c[0])?, num(c[1])?, num(c[2])?, num(c[3])?);
                let norm = q.norm();
                if (norm - 1.0).abs() > QUATERNION_TOLERANCE {
                    return Err(parse_err(line, format!("row {row}: quaternion norm {norm} is not close to 1")));
                }
                // Exactly-unit quaternions are kept bit-for-bit so files
                // round-trip.
                Some(if (norm - 1.0).abs() > 1e-12 {
                    UnitQuaternion::from_quaternion(q)
                } else {
                    UnitQuaternion::new_unchecked(q)
                })
            }
            None => None,
        };
        let gt_pos = match &pos_cols {
            Some(c) => Some([num(c[0])?, num(c[1])?]),
            None => None,
        };
        samples.push(ImuSample {
            t,
            gyro: [num(base[1])?, num(base[2])?, num(base[3])?],
            accel: [num(base[4])?, num(base[5])?, num(base[6])?],
            orientation,
            gt_pos,
        });
    }
    let id = path.file_stem().map_or_else(|| "sequence".to_string(), |s| s.to_string_lossy().into_owned());
    SequenceRecord::new(id, samples)
}

pub fn load_sequence(path: &Path) -> Result<SequenceRecord> {
    read_sequence(std::fs::File::open(path)?, path)
}

pub(crate) fn rotate(q: &UnitQuaternion<f64>, v: [f64; 3]) -> [f64; 3] {
    let r = q.transform_vector(&Vector3::new(v[0], v[1], v[2]));
    [r.x, r.y, r.z]
}

/// Rotates gyro and accelerometer readings into the navigation frame.
/// Gravity stays in the specific force. The result carries identity
/// orientations, so applying this twice changes nothing further.
///
/// A device yawed +90° (counter-clockwise seen from above) that reads
/// (1, 0, g) is accelerating along navigation +y: (0, 1, g).
pub fn to_navigation_frame(seq: &SequenceRecord) -> Result<SequenceRecord> {
    if !seq.has_orientation() {
        return Err(Error::Missing(format!("sequence {:?} has no orientation stream", seq.id)));
    }
    let samples = seq
        .samples
        .iter()
        .map(|s| {
            let q = s.orientation.expect("checked above");
            ImuSample {
                gyro: rotate(&q, s.gyro),
                accel: rotate(&q, s.accel),
                orientation: Some(UnitQuaternion::identity()),
                ..s.clone()
            }
        })
        .collect();
    Ok(SequenceRecord { id: seq.id.clone(), samples, sample_rate: seq.sample_rate })
}
