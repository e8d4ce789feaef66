//! Synthetic pedestrian walks with exact kinematics.
//!
//! The walker follows an analytic planar path. Progress along the path
//! surges and slows once per step, and the body bounces vertically at the
//! same rate, so the specific force carries both the velocity changes and
//! a step signal. The device is held level and faces along the path.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use nalgebra::{UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{rotate, ImuSample, SequenceRecord};
use crate::error::{ensure, Error, Result};
use crate::odometry::VelocitySeries;

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathType {
    Line,
    Circle,
    FigureSine,
}

impl fmt::Display for PathType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PathType::Line => "line",
            PathType::Circle => "circle",
            PathType::FigureSine => "figure_sine",
        })
    }
}

impl FromStr for PathType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "line" => Ok(PathType::Line),
            "circle" => Ok(PathType::Circle),
            "figure_sine" => Ok(PathType::FigureSine),
            other => Err(Error::contract(format!(
                "unknown path type {other:?}, expected line, circle or figure_sine"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub path_type: PathType,
    /// Mean progress along the path, m/s.
    pub speed: f64,
    pub duration: f64,
    pub sample_rate: f64,
    pub noise_std_accel: f64,
    pub noise_std_gyro: f64,
    pub rng_seed: u64,
    pub id: String,
    /// Initial heading, radians counter-clockwise from +x.
    pub heading: f64,
    pub origin: [f64; 2],
    pub radius: f64,
    pub clockwise: bool,
    pub sine_amplitude: f64,
    pub sine_wavelength: f64,
    /// Steps per second; 0 disables the gait.
    pub step_frequency: f64,
    /// Vertical bounce amplitude, m/s².
    pub bounce_amplitude: f64,
    /// Relative forward-speed swing per step, in [0, 1).
    pub surge_ratio: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            path_type: PathType::Line,
            speed: 1.0,
            duration: 10.0,
            sample_rate: 200.0,
            noise_std_accel: 0.0,
            noise_std_gyro: 0.0,
            rng_seed: 0,
            id: "synthetic".into(),
            heading: 0.0,
            origin: [0.0, 0.0],
            radius: 10.0,
            clockwise: false,
            sine_amplitude: 2.0,
            sine_wavelength: 20.0,
            step_frequency: 2.0,
            bounce_amplitude: 2.5,
            surge_ratio: 0.15,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.speed > 0.0, "speed must be positive");
        ensure!(self.duration > 0.0, "duration must be positive");
        ensure!(self.sample_rate > 0.0, "sample_rate must be positive");
        ensure!(
            self.duration * self.sample_rate >= 1.0,
            "duration {} s at {} Hz gives fewer than 2 samples",
            self.duration,
            self.sample_rate
        );
        ensure!(self.noise_std_accel >= 0.0 && self.noise_std_gyro >= 0.0, "noise levels must be non-negative");
        ensure!(self.radius > 0.0, "radius must be positive");
        ensure!(self.sine_wavelength > 0.0, "sine_wavelength must be positive");
        ensure!(self.step_frequency >= 0.0, "step_frequency must be non-negative");
        ensure!((0.0..1.0).contains(&self.surge_ratio), "surge_ratio must lie in [0, 1)");
        ensure!(
            [self.heading, self.origin[0], self.origin[1], self.sine_amplitude, self.bounce_amplitude]
                .iter()
                .all(|v| v.is_finite()),
            "synthetic config contains non-finite values"
        );
        Ok(())
    }

    pub fn num_samples(&self) -> usize {
        (self.duration * self.sample_rate + 1e-9).floor() as usize + 1
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub record: SequenceRecord,
    /// Exact velocity at samples 1.., starting from sample 0.
    pub velocity: VelocitySeries,
    /// Exact velocity at every sample.
    pub velocity_at_samples: Vec<[f64; 2]>,
    /// Exact navigation-frame specific force at every sample.
    pub specific_force: Vec<[f64; 3]>,
}

/// Position, first and second derivative of the path in its local frame,
/// at arc parameter `u`.
fn local_path(cfg: &SyntheticConfig, u: f64) -> ([f64; 2], [f64; 2], [f64; 2]) {
    match cfg.path_type {
        PathType::Line => ([u, 0.0], [1.0, 0.0], [0.0, 0.0]),
        PathType::Circle => {
            let r = cfg.radius;
            let s = if cfg.clockwise { -1.0 } else { 1.0 };
            let (sin, cos) = (u / r).sin_cos();
            ([r * sin, s * r * (1.0 - cos)], [cos, s * sin], [-sin / r, s * cos / r])
        }
        PathType::FigureSine => {
            let (a, k) = (cfg.sine_amplitude, TAU / cfg.sine_wavelength);
            let (sin, cos) = (k * u).sin_cos();
            ([u, a * sin], [1.0, a * k * cos], [0.0, -a * k * k * sin])
        }
    }
}

pub fn synthesize(cfg: &SyntheticConfig) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let n = cfg.num_samples();
    let omega = TAU * cfg.step_frequency;
    let (sh, ch) = cfg.heading.sin_cos();
    let turn = |v: [f64; 2]| [ch * v[0] - sh * v[1], sh * v[0] + ch * v[1]];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let accel_noise = Normal::new(0.0, cfg.noise_std_accel).expect("non-negative std");
    let gyro_noise = Normal::new(0.0, cfg.noise_std_gyro).expect("non-negative std");

    let mut samples = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    let mut forces = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 / cfg.sample_rate;
        let a = cfg.surge_ratio;
        let (u, du, ddu) = if omega > 0.0 {
            let (s, c) = (omega * t).sin_cos();
            (cfg.speed * (t + a / omega * (1.0 - c)), cfg.speed * (1.0 + a * s), cfg.speed * a * omega * c)
        } else {
            (cfg.speed * t, cfg.speed, 0.0)
        };
        let (p, dp, ddp) = local_path(cfg, u);
        let p = turn(p);
        let v = turn([dp[0] * du, dp[1] * du]);
        let acc = turn([ddp[0] * du * du + dp[0] * ddu, ddp[1] * du * du + dp[1] * ddu]);
        let yaw = v[1].atan2(v[0]);
        let yaw_rate = (v[0] * acc[1] - v[1] * acc[0]) / (v[0] * v[0] + v[1] * v[1]);
        let bounce = if omega > 0.0 { cfg.bounce_amplitude * (omega * t).sin() } else { 0.0 };
        let f_nav = [acc[0], acc[1], GRAVITY + bounce];

        let q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw);
        let mut f_dev = rotate(&q.inverse(), f_nav);
        let mut w_dev = [0.0, 0.0, yaw_rate];
        for c in 0..3 {
            f_dev[c] += accel_noise.sample(&mut rng);
            w_dev[c] += gyro_noise.sample(&mut rng);
        }
        samples.push(ImuSample {
            t,
            gyro: w_dev,
            accel: f_dev,
            orientation: Some(q),
            gt_pos: Some([cfg.origin[0] + p[0], cfg.origin[1] + p[1]]),
        });
        velocities.push(v);
        forces.push(f_nav);
    }
    let record = SequenceRecord::new(cfg.id.clone(), samples)?;
    let velocity = VelocitySeries::new(
        record.samples[0].t,
        record.samples[1..].iter().map(|s| s.t).collect(),
        velocities[1..].iter().map(|v| v[0]).collect(),
        velocities[1..].iter().map(|v| v[1]).collect(),
    )?;
    Ok(SyntheticSequence { record, velocity, velocity_at_samples: velocities, specific_force: forces })
}
