//! IMU forward propagation and scan deskewing.

use crate::error::{Error, Result};
use crate::geometry::{idx, skew, so3_right_jacobian, Mat18, Mat3, RigidTransform, Rotation, Vec3};
use crate::io::{ImuSample, InitConfig, LidarScan, ScanPoint, SensorConfig};

pub use crate::geometry::NavState;

/// 18×18 error-state covariance in tangent ordering.
pub type StateCovariance = Mat18;

pub const MIN_INIT_SAMPLES: usize = 20;

/// Tolerance for timestamps falling just outside the buffer through rounding.
const TIME_EPS: f64 = 1e-9;

/// Poses (world ← IMU) at every propagation node of one scan interval.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseBuffer {
    pub poses: Vec<(f64, RigidTransform)>,
}

impl PoseBuffer {
    pub fn t_start(&self) -> Option<f64> {
        self.poses.first().map(|p| p.0)
    }

    pub fn t_end(&self) -> Option<f64> {
        self.poses.last().map(|p| p.0)
    }

    pub fn covers(&self, t: f64) -> bool {
        match (self.t_start(), self.t_end()) {
            (Some(a), Some(b)) => t >= a - TIME_EPS && t <= b + TIME_EPS,
            _ => false,
        }
    }

    /// Piecewise screw-linear interpolation between buffered poses.
    pub fn pose_at(&self, t: f64) -> Option<RigidTransform> {
        if !self.covers(t) {
            return None;
        }
        let n = self.poses.len();
        if n == 1 {
            return Some(self.poses[0].1);
        }
        let hi = self.poses.partition_point(|p| p.0 < t).clamp(1, n - 1);
        let (ta, a) = self.poses[hi - 1];
        let (tb, b) = self.poses[hi];
        if t <= ta {
            return Some(a);
        }
        if t >= tb {
            return Some(b);
        }
        let s = (t - ta) / (tb - ta);
        Some(RigidTransform::interpolate(&a, &b, s))
    }
}

/// Static-platform initialization: gravity from the mean specific force, gyro bias from
/// the mean angular rate, identity pose.
pub fn initialize(samples: &[ImuSample], prior: &InitConfig) -> Result<(NavState, StateCovariance)> {
    if samples.len() < MIN_INIT_SAMPLES {
        return Err(Error::Initialization(format!(
            "need at least {MIN_INIT_SAMPLES} static IMU samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len() as f64;
    let mean_acc = samples.iter().map(|s| s.accel).sum::<Vec3>() / n;
    let mean_gyro = samples.iter().map(|s| s.gyro).sum::<Vec3>() / n;
    let norm = mean_acc.norm();
    if !(8.0..=12.0).contains(&norm) {
        return Err(Error::Initialization(format!(
            "mean accelerometer norm {norm:.3} m/s² outside [8, 12]; platform not static or wrong units"
        )));
    }
    let state = NavState {
        gravity: -mean_acc / norm * crate::GRAVITY,
        gyro_bias: mean_gyro,
        ..NavState::default()
    };
    let mut cov = StateCovariance::zeros();
    let blocks = [
        (idx::POS, prior.position_std),
        (idx::ROT, prior.rotation_std),
        (idx::VEL, prior.velocity_std),
        (idx::BG, prior.gyro_bias_std),
        (idx::BA, prior.accel_bias_std),
        (idx::GRAV, prior.gravity_std),
    ];
    for (at, std) in blocks {
        for i in 0..3 {
            cov[(at + i, at + i)] = std * std;
        }
    }
    Ok((state, cov))
}

/// Bias-corrected IMU input held over one propagation step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuInput {
    pub gyro: Vec3,
    pub accel: Vec3,
}

/// One step of `x ⊞ Δt·f(x, u, 0)`.
pub fn propagate_step(x: &NavState, u: &ImuInput, dt: f64) -> NavState {
    let acc_world = x.rotation.matrix() * (u.accel - x.accel_bias) + x.gravity;
    let omega = u.gyro - x.gyro_bias;
    NavState {
        position: x.position + (x.velocity + 0.5 * acc_world * dt) * dt,
        rotation: x.rotation * Rotation::exp(&(omega * dt)),
        velocity: x.velocity + acc_world * dt,
        ..*x
    }
}

/// Error-state Jacobian of [`propagate_step`] with respect to a right perturbation of `x`.
pub fn transition_jacobian(x: &NavState, u: &ImuInput, dt: f64) -> Mat18 {
    let r = *x.rotation.matrix();
    let acc_skew = skew(&(u.accel - x.accel_bias));
    let omega_dt = (u.gyro - x.gyro_bias) * dt;
    let eye = Mat3::identity();
    let half_dt2 = 0.5 * dt * dt;

    let mut f = Mat18::identity();
    let mut set = |row: usize, col: usize, m: Mat3| f.fixed_view_mut::<3, 3>(row, col).copy_from(&m);
    set(idx::POS, idx::ROT, -half_dt2 * r * acc_skew);
    set(idx::POS, idx::VEL, eye * dt);
    set(idx::POS, idx::BA, -half_dt2 * r);
    set(idx::POS, idx::GRAV, eye * half_dt2);
    set(idx::ROT, idx::ROT, *Rotation::exp(&-omega_dt).matrix());
    set(idx::ROT, idx::BG, -so3_right_jacobian(&omega_dt) * dt);
    set(idx::VEL, idx::ROT, -dt * r * acc_skew);
    set(idx::VEL, idx::BA, -dt * r);
    set(idx::VEL, idx::GRAV, eye * dt);
    f
}

/// Discrete process noise of one step for white measurement noise and bias random walks
/// given as continuous densities.
pub fn process_noise(x: &NavState, u: &ImuInput, dt: f64, noise: &SensorConfig) -> Mat18 {
    let r = *x.rotation.matrix();
    let omega_dt = (u.gyro - x.gyro_bias) * dt;
    let jr = so3_right_jacobian(&omega_dt);
    let vg = noise.gyro_noise.powi(2) * dt;
    let va = noise.accel_noise.powi(2) * dt;
    let vbg = noise.gyro_bias_walk.powi(2) * dt;
    let vba = noise.accel_bias_walk.powi(2) * dt;

    let mut q = Mat18::zeros();
    let rrt = r * r.transpose();
    q.fixed_view_mut::<3, 3>(idx::ROT, idx::ROT).copy_from(&(jr * jr.transpose() * vg));
    q.fixed_view_mut::<3, 3>(idx::VEL, idx::VEL).copy_from(&(rrt * va));
    q.fixed_view_mut::<3, 3>(idx::POS, idx::POS).copy_from(&(rrt * (0.25 * dt * dt * va)));
    let pv = rrt * (0.5 * dt * va);
    q.fixed_view_mut::<3, 3>(idx::POS, idx::VEL).copy_from(&pv);
    q.fixed_view_mut::<3, 3>(idx::VEL, idx::POS).copy_from(&pv);
    q.fixed_view_mut::<3, 3>(idx::BG, idx::BG).copy_from(&(Mat3::identity() * vbg));
    q.fixed_view_mut::<3, 3>(idx::BA, idx::BA).copy_from(&(Mat3::identity() * vba));
    q
}

fn sample_at(imu: &[ImuSample], t: f64) -> (Vec3, Vec3) {
    let n = imu.len();
    let hi = imu.partition_point(|s| s.t < t);
    if hi == 0 {
        return (imu[0].gyro, imu[0].accel);
    }
    if hi >= n {
        return (imu[n - 1].gyro, imu[n - 1].accel);
    }
    let (a, b) = (&imu[hi - 1], &imu[hi]);
    let s = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
    (a.gyro + (b.gyro - a.gyro) * s, a.accel + (b.accel - a.accel) * s)
}

/// Propagates state and covariance from `t_start` to `t_end`.
///
/// Integration nodes are `t_start`, every IMU timestamp strictly inside the interval, and
/// `t_end`. Each step holds the mean of the (linearly interpolated) measurements at its
/// two nodes. An empty `imu` slice leaves the inputs unchanged.
pub fn forward_propagate(
    x: &NavState,
    cov: &StateCovariance,
    imu: &[ImuSample],
    t_start: f64,
    t_end: f64,
    noise: &SensorConfig,
) -> (NavState, StateCovariance, PoseBuffer) {
    let mut buffer = PoseBuffer { poses: vec![(t_start, x.pose())] };
    if imu.is_empty() || t_end <= t_start {
        return (*x, *cov, buffer);
    }
    let mut nodes = Vec::with_capacity(imu.len() + 2);
    nodes.push(t_start);
    nodes.extend(imu.iter().map(|s| s.t).filter(|&t| t > t_start && t < t_end));
    nodes.push(t_end);

    let mut state = *x;
    let mut p = *cov;
    let mut prev = sample_at(imu, t_start);
    for w in nodes.windows(2) {
        let (ta, tb) = (w[0], w[1]);
        let dt = tb - ta;
        let next = sample_at(imu, tb);
        let u = ImuInput { gyro: 0.5 * (prev.0 + next.0), accel: 0.5 * (prev.1 + next.1) };
        let f = transition_jacobian(&state, &u, dt);
        let q = process_noise(&state, &u, dt, noise);
        p = f * p * f.transpose() + q;
        p = 0.5 * (p + p.transpose());
        state = propagate_step(&state, &u, dt);
        buffer.poses.push((tb, state.pose()));
        prev = next;
    }
    (state, p, buffer)
}

/// Re-expresses every point in the LiDAR frame at the scan end time.
pub fn deskew(scan: &LidarScan, buffer: &PoseBuffer, extrinsic: &RigidTransform) -> Result<LidarScan> {
    let end_pose = buffer
        .pose_at(scan.t_end)
        .ok_or(Error::DeskewCoverage { offset: 0.0 })?;
    let end_inv = (end_pose * *extrinsic).inverse();
    let points = scan
        .points
        .iter()
        .map(|p| {
            if p.offset == 0.0 {
                return Ok(*p);
            }
            let pose = buffer
                .pose_at(scan.t_end + p.offset)
                .ok_or(Error::DeskewCoverage { offset: p.offset })?;
            let rel = end_inv * (pose * *extrinsic);
            Ok(ScanPoint { offset: 0.0, xyz: rel.apply(&p.xyz) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LidarScan { t_end: scan.t_end, points })
}
