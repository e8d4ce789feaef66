//! Deep inertial odometry for pedestrian tracking.
//!
//! A 1D Res2Net network with convolutional block attention regresses the
//! horizontal velocity of a window of IMU samples; velocities integrate
//! into 2D positions, which are scored with absolute and relative
//! translation error against ground truth or a step-and-heading baseline.
//!
//! Everything runs on a small in-crate reverse-mode tape ([`tensor`]), so
//! every gradient can be checked against finite differences.

pub mod cbam;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod odometry;
pub mod reconstruct;
pub mod res2net;
pub mod tensor;
pub mod training;
pub mod velonet;

pub use error::{Error, Result};
