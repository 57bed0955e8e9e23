//! LiDAR-inertial odometry with scale-aware adaptive voxelization.
//!
//! Pipeline per scan: IMU forward propagation and deskew ([`preprocess`]),
//! feedback-controlled voxel sizing and bi-resolution downsampling ([`adavox`]),
//! voxel-pruned correspondence search over a plane-annotated hash map ([`voxelmap`]),
//! and a hybrid point-to-plane / point-to-point iterated error-state Kalman update
//! ([`estimator`]). [`synth`] generates ray-cast sensor logs with exact ground truth and
//! [`harness`] ties everything together with evaluation metrics and ablation runners.

pub mod adavox;
pub mod error;
pub mod estimator;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod preprocess;
pub mod synth;
pub mod voxelmap;

pub use error::{Error, Result};

/// Nominal gravity magnitude (m/s²).
pub const GRAVITY: f64 = 9.81;
