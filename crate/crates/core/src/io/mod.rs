//! Sensor logs, configuration and trajectory files.
//!
//! On-disk layout of a log directory:
//!
//! ```text
//! <log>/imu.csv            t,wx,wy,wz,ax,ay,az        (s, rad/s, m/s²)
//! <log>/scans/<t_end>.csv  offset,x,y,z               (s ≤ 0, m in the LiDAR frame)
//! <log>/gt.txt             t tx ty tz qx qy qz qw     (optional ground truth)
//! <log>/meta.toml          generator metadata          (optional)
//! ```
//!
//! Numbers in the CSV files are written with the shortest representation that parses
//! back to the identical `f64`, so a written log reloads bit-exactly. `<t_end>` in the
//! scan file name uses the same representation.

mod config;
mod log;
mod trajectory;

pub use config::{
    load_config, parse_config, write_config, AdavoxConfig, Config, ControllerStrategy,
    EstimatorConfig, InitConfig, MapConfig, SearchStrategy, SensorConfig,
};
pub use log::{load_log, write_log, LogMeta, SensorLog};
pub use trajectory::{format_trajectory, read_trajectory, write_trajectory, TrajectoryRecord};

use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vec3,
    pub accel: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanPoint {
    /// Seconds relative to the scan end time, always ≤ 0.
    pub offset: f64,
    pub xyz: Vec3,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LidarScan {
    pub t_end: f64,
    pub points: Vec<ScanPoint>,
}

impl LidarScan {
    /// Absolute time of the earliest point (`t_end` for an empty scan).
    pub fn t_start(&self) -> f64 {
        self.t_end + self.points.iter().map(|p| p.offset).fold(0.0, f64::min)
    }

    pub fn xyz(&self) -> Vec<Vec3> {
        self.points.iter().map(|p| p.xyz).collect()
    }
}
