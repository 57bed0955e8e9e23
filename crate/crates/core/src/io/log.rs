use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::trajectory::{read_trajectory, write_trajectory, TrajectoryRecord};
use super::{ImuSample, LidarScan, ScanPoint};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

const IMU_HEADER: &str = "t,wx,wy,wz,ax,ay,az";
const SCAN_HEADER: &str = "offset,x,y,z";

/// Generator metadata stored next to synthetic logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMeta {
    pub scenario: String,
    pub seed: u64,
    /// Name of the pseudo-random generator used for noise.
    pub rng: String,
    pub noise_free: bool,
}

/// Time-ordered IMU and LiDAR streams plus optional ground truth.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SensorLog {
    pub imu: Vec<ImuSample>,
    pub scans: Vec<LidarScan>,
    pub ground_truth: Option<Vec<TrajectoryRecord>>,
    pub meta: Option<LogMeta>,
}

impl SensorLog {
    /// IMU samples bracketing `[t0, t1]`: the last sample at or before `t0` through the
    /// first sample at or after `t1`. `None` when the stream does not cover the interval.
    pub fn imu_between(&self, t0: f64, t1: f64) -> Option<&[ImuSample]> {
        let first_after = self.imu.partition_point(|s| s.t <= t0);
        if first_after == 0 {
            return None;
        }
        let start = first_after - 1;
        let end = self.imu.partition_point(|s| s.t < t1);
        if end >= self.imu.len() {
            return None;
        }
        Some(&self.imu[start..=end])
    }
}

fn parse_err(file: &Path, line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Parse { file: file.to_path_buf(), line, column, message: message.into() }
}

/// Parses a headered CSV into rows of exactly `width` floats.
fn parse_csv(path: &Path, header: &str, width: usize) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        Some((_, h)) => return Err(parse_err(path, 1, 1, format!("expected header `{header}`, found `{h}`"))),
        None => return Err(parse_err(path, 1, 1, format!("missing header `{header}`"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(width);
        for (c, field) in line.split(',').enumerate() {
            if c >= width {
                return Err(parse_err(path, i + 1, c + 1, format!("expected {width} columns")));
            }
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, i + 1, c + 1, format!("not a number: `{field}`")))?;
            if !v.is_finite() {
                return Err(parse_err(path, i + 1, c + 1, "non-finite value"));
            }
            row.push(v);
        }
        if row.len() != width {
            return Err(parse_err(path, i + 1, row.len() + 1, format!("expected {width} columns, found {}", row.len())));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn load_imu(path: &Path) -> Result<Vec<ImuSample>> {
    let rows = parse_csv(path, IMU_HEADER, 7)?;
    let mut out: Vec<ImuSample> = Vec::with_capacity(rows.len());
    for (i, r) in rows.into_iter().enumerate() {
        let s = ImuSample { t: r[0], gyro: Vec3::new(r[1], r[2], r[3]), accel: Vec3::new(r[4], r[5], r[6]) };
        if let Some(prev) = out.last() {
            if s.t <= prev.t {
                // +2: one header line, one-based numbering.
                return Err(parse_err(path, i + 2, 1, format!("timestamp {} not after {}", s.t, prev.t)));
            }
        }
        out.push(s);
    }
    Ok(out)
}

fn load_scan(path: &Path, t_end: f64) -> Result<LidarScan> {
    let rows = parse_csv(path, SCAN_HEADER, 4)?;
    let mut points = Vec::with_capacity(rows.len());
    for (i, r) in rows.into_iter().enumerate() {
        if r[0] > 0.0 {
            return Err(parse_err(path, i + 2, 1, format!("offset {} is positive", r[0])));
        }
        points.push(ScanPoint { offset: r[0], xyz: Vec3::new(r[1], r[2], r[3]) });
    }
    Ok(LidarScan { t_end, points })
}

/// Loads a log directory and checks that every scan is covered by IMU samples.
pub fn load_log(dir: impl AsRef<Path>) -> Result<SensorLog> {
    let dir = dir.as_ref();
    let imu = load_imu(&dir.join("imu.csv"))?;

    let scan_dir = dir.join("scans");
    let mut entries: Vec<(f64, PathBuf)> = Vec::new();
    if scan_dir.is_dir() {
        for entry in fs::read_dir(&scan_dir).map_err(|e| Error::io(&scan_dir, e))? {
            let path = entry.map_err(|e| Error::io(&scan_dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("csv") {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let t_end: f64 = stem
                .parse()
                .map_err(|_| parse_err(&path, 0, 0, "scan file name is not a timestamp"))?;
            entries.push((t_end, path));
        }
    }
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut scans = Vec::with_capacity(entries.len());
    for (t_end, path) in &entries {
        scans.push(load_scan(path, *t_end)?);
    }

    let gt_path = dir.join("gt.txt");
    let ground_truth = if gt_path.exists() { Some(read_trajectory(&gt_path)?) } else { None };

    let meta_path = dir.join("meta.toml");
    let meta = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        Some(toml::from_str(&text).map_err(|e| parse_err(&meta_path, 0, 0, e.to_string()))?)
    } else {
        None
    };

    let log = SensorLog { imu, scans, ground_truth, meta };
    for scan in &log.scans {
        if log.imu_between(scan.t_start(), scan.t_end).is_none() {
            return Err(Error::ImuCoverage { t_end: scan.t_end });
        }
    }
    Ok(log)
}

/// Writes a log in the layout read by [`load_log`].
pub fn write_log(log: &SensorLog, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let scan_dir = dir.join("scans");
    fs::create_dir_all(&scan_dir).map_err(|e| Error::io(&scan_dir, e))?;

    let mut text = String::with_capacity(64 * log.imu.len() + 32);
    text.push_str(IMU_HEADER);
    text.push('\n');
    for s in &log.imu {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{},{}",
            s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.accel.x, s.accel.y, s.accel.z
        );
    }
    let imu_path = dir.join("imu.csv");
    fs::write(&imu_path, text).map_err(|e| Error::io(&imu_path, e))?;

    for scan in &log.scans {
        let mut text = String::with_capacity(48 * scan.points.len() + 16);
        text.push_str(SCAN_HEADER);
        text.push('\n');
        for p in &scan.points {
            let _ = writeln!(text, "{},{},{},{}", p.offset, p.xyz.x, p.xyz.y, p.xyz.z);
        }
        let path = scan_dir.join(format!("{}.csv", scan.t_end));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }

    if let Some(gt) = &log.ground_truth {
        write_trajectory(gt, dir.join("gt.txt"))?;
    }
    if let Some(meta) = &log.meta {
        let path = dir.join("meta.toml");
        let text = toml::to_string(meta).map_err(|e| Error::Config { key: "meta".into(), message: e.to_string() })?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
