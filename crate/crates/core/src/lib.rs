//! Multi-scale selective state-space video anomaly detection.
//!
//! Appearance is modelled by spatial encoders over three patch granularities,
//! motion by temporal encoders over frame differences at three window
//! lengths. Fused features are split into common, appearance and motion
//! parts, filtered through prototype memories and decoded into a predicted
//! next frame and motion field. Anomalies are scored from the PSNR of both
//! reconstructions.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod mix;
pub mod model;
pub mod nn;
pub mod objective;
pub mod score;
pub mod spatial;
pub mod ssm;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
