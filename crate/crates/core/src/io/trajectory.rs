use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Rotation, Vec3};

/// A timestamped pose; orientation is a unit quaternion written as `(x, y, z, w)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub t: f64,
    pub position: Vec3,
    pub orientation: UnitQuaternion<f64>,
}

impl TrajectoryRecord {
    pub fn from_pose(t: f64, pose: &RigidTransform) -> Self {
        Self { t, position: pose.translation, orientation: pose.rotation.to_quaternion() }
    }

    pub fn pose(&self) -> RigidTransform {
        RigidTransform::new(Rotation::from_quaternion(&self.orientation), self.position)
    }
}

/// Fixed nine decimals with trailing zeros (and a bare trailing point) removed.
fn trimmed(v: f64) -> String {
    let mut s = format!("{v:.9}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

/// Renders records as `t tx ty tz qx qy qz qw` lines.
///
/// Time keeps nine decimals (nanoseconds); the other fields are rounded to 1e-9 and
/// trimmed, so the identity pose prints as `0 0 0 0 0 0 1`.
pub fn format_trajectory(records: &[TrajectoryRecord]) -> String {
    let mut out = String::with_capacity(records.len() * 96);
    for r in records {
        let q = r.orientation.quaternion();
        let _ = writeln!(
            out,
            "{:.9} {} {} {} {} {} {} {}",
            r.t,
            trimmed(r.position.x),
            trimmed(r.position.y),
            trimmed(r.position.z),
            trimmed(q.i),
            trimmed(q.j),
            trimmed(q.k),
            trimmed(q.w)
        );
    }
    out
}

pub fn write_trajectory(records: &[TrajectoryRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_trajectory(records)).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Vec<TrajectoryRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut v = [0.0; 8];
        let mut n = 0;
        for (c, field) in line.split_whitespace().enumerate() {
            if c >= 8 {
                return Err(Error::Parse { file: path.into(), line: i + 1, column: c + 1, message: "expected 8 fields".into() });
            }
            v[c] = field.parse().map_err(|_| Error::Parse {
                file: path.into(),
                line: i + 1,
                column: c + 1,
                message: format!("not a number: `{field}`"),
            })?;
            n += 1;
        }
        if n != 8 {
            return Err(Error::Parse { file: path.into(), line: i + 1, column: n + 1, message: "expected 8 fields".into() });
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if q.norm() < 1e-6 {
            return Err(Error::Parse { file: path.into(), line: i + 1, column: 5, message: "zero quaternion".into() });
        }
        out.push(TrajectoryRecord {
            t: v[0],
            position: Vec3::new(v[1], v[2], v[3]),
            orientation: UnitQuaternion::from_quaternion(q),
        });
    }
    Ok(out)
}
