//! Ray-cast synthetic worlds with exact ground truth.
//!
//! Worlds are unions of axis-aligned rectangles; ray intersection is closed form. Noise
//! comes from ChaCha8 seeded with the log seed: stream 0 drives the IMU, stream `k + 1`
//! drives scan `k`. Scenario geometry is fixed; only the noise depends on the seed.

use std::fmt::Write as _;

use nalgebra::Vector4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Rotation, Vec3};
use crate::io::{write_config, write_log, Config, ImuSample, LidarScan, LogMeta, ScanPoint, SensorLog, TrajectoryRecord};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Entry parameter of the ray into the box if it is hit before `t_max`.
    fn ray_entry(&self, o: &Vec3, inv_d: &Vec3, t_max: f64) -> bool {
        let mut t0: f64 = 0.0;
        let mut t1 = t_max;
        for a in 0..3 {
            let (mut ta, mut tb) = ((self.min[a] - o[a]) * inv_d[a], (self.max[a] - o[a]) * inv_d[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            if ta.is_nan() || tb.is_nan() {
                // Ray parallel to the slab with the origin on its boundary.
                continue;
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
            if t0 > t1 {
                return false;
            }
        }
        true
    }
}

/// Axis-aligned rectangle: `min[axis] == max[axis]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub axis: usize,
    pub min: Vec3,
    pub max: Vec3,
}

impl Rect {
    pub fn new(axis: usize, coord: f64, min: Vec3, max: Vec3) -> Self {
        let mut lo = min;
        let mut hi = max;
        lo[axis] = coord;
        hi[axis] = coord;
        Self { axis, min: lo, max: hi }
    }

    pub fn area(&self) -> f64 {
        let e = self.max - self.min;
        (0..3).filter(|&a| a != self.axis).map(|a| e[a]).product()
    }

    pub fn intersect(&self, o: &Vec3, d: &Vec3) -> Option<f64> {
        let a = self.axis;
        if d[a] == 0.0 {
            return None;
        }
        let t = (self.min[a] - o[a]) / d[a];
        if t <= 1e-9 {
            return None;
        }
        let p = o + d * t;
        for b in 0..3 {
            if b != a && (p[b] < self.min[b] || p[b] > self.max[b]) {
                return None;
            }
        }
        Some(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Group {
    bounds: Aabb,
    start: usize,
    end: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct World {
    pub rects: Vec<Rect>,
    /// Returns landing inside these regions are dropped (e.g. water).
    pub open_regions: Vec<Aabb>,
    groups: Vec<Group>,
}

impl World {
    fn push_group(&mut self, rects: Vec<Rect>) {
        let start = self.rects.len();
        let mut bounds = Aabb { min: Vec3::repeat(f64::INFINITY), max: Vec3::repeat(f64::NEG_INFINITY) };
        for r in &rects {
            bounds.min = bounds.min.inf(&r.min);
            bounds.max = bounds.max.sup(&r.max);
        }
        self.rects.extend(rects);
        self.groups.push(Group { bounds, start, end: self.rects.len() });
    }

    pub fn add_rect(&mut self, rect: Rect) {
        debug_assert!(rect.area() > 0.0);
        self.push_group(vec![rect]);
    }

    /// Six faces of a box.
    pub fn add_box(&mut self, min: Vec3, max: Vec3) {
        let mut rects = Vec::with_capacity(6);
        for a in 0..3 {
            rects.push(Rect::new(a, min[a], min, max));
            rects.push(Rect::new(a, max[a], min, max));
        }
        self.push_group(rects);
    }

    /// Distance along the unit direction `d` to the first surface, ignoring open regions.
    pub fn raycast(&self, o: &Vec3, d: &Vec3, max_range: f64) -> Option<f64> {
        let inv = Vec3::new(1.0 / d.x, 1.0 / d.y, 1.0 / d.z);
        let mut best = max_range;
        let mut hit = false;
        for g in &self.groups {
            if !g.bounds.ray_entry(o, &inv, best) {
                continue;
            }
            for r in &self.rects[g.start..g.end] {
                if let Some(t) = r.intersect(o, d) {
                    if t < best {
                        best = t;
                        hit = true;
                    }
                }
            }
        }
        if !hit {
            return None;
        }
        let p = o + d * best;
        if self.open_regions.iter().any(|r| r.contains(&p)) {
            None
        } else {
            Some(best)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LidarModel {
    /// Elevation of each channel (rad), lowest first.
    pub elevations: Vec<f64>,
    pub azimuths: usize,
    pub max_range: f64,
    pub range_std: f64,
    pub bearing_std: f64,
}

impl Default for LidarModel {
    fn default() -> Self {
        Self {
            elevations: (0..16).map(|i| (-15.0 + 2.0 * i as f64).to_radians()).collect(),
            azimuths: 900,
            max_range: 100.0,
            range_std: 0.02,
            bearing_std: 0.05f64.to_radians(),
        }
    }
}

impl LidarModel {
    /// 32 channels over ±45°, so floor and ceiling of a small room stay in view.
    pub fn wide_fov() -> Self {
        Self { elevations: (0..32).map(|i| (-45.0 + 90.0 * i as f64 / 31.0).to_radians()).collect(), ..Self::default() }
    }

    pub fn noise_free(mut self) -> Self {
        self.range_std = 0.0;
        self.bearing_std = 0.0;
        self
    }
}

/// Position and yaw knot of a piecewise quintic Hermite path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Knot {
    pub t: f64,
    pub position: Vec3,
    pub yaw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Path {
    /// C² path through knots; knot velocities by central differences, zero next to a hold
    /// (two equal consecutive knots) and at both ends; knot accelerations zero.
    Hermite(Vec<Knot>),
    /// Constant-rate circle in the horizontal plane, heading along the tangent.
    Circle { center: Vec3, radius: f64, rate: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySpec {
    pub path: Path,
    pub duration: f64,
    pub imu_rate: f64,
    pub scan_rate: f64,
    pub first_scan_end: f64,
}

/// Pose and its derivatives at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
    pub rotation: Rotation,
    /// Angular rate in the body frame.
    pub omega: Vec3,
}

impl Kinematics {
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::new(self.rotation, self.position)
    }
}

const QUINTIC_BASIS: [[f64; 6]; 6] = [
    [1.0, 0.0, 0.0, -10.0, 15.0, -6.0],
    [0.0, 1.0, 0.0, -6.0, 8.0, -3.0],
    [0.0, 0.0, 0.5, -1.5, 1.5, -0.5],
    [0.0, 0.0, 0.0, 0.5, -1.0, 0.5],
    [0.0, 0.0, 0.0, -4.0, 7.0, -3.0],
    [0.0, 0.0, 0.0, 10.0, -15.0, 6.0],
];

type V4 = Vector4<f64>;

fn knot_vec(k: &Knot) -> V4 {
    V4::new(k.position.x, k.position.y, k.position.z, k.yaw)
}

fn knot_velocities(knots: &[Knot]) -> Vec<V4> {
    let n = knots.len();
    (0..n)
        .map(|i| {
            if i == 0 || i + 1 == n {
                return V4::zeros();
            }
            let (a, b, c) = (knot_vec(&knots[i - 1]), knot_vec(&knots[i]), knot_vec(&knots[i + 1]));
            if a == b || b == c {
                return V4::zeros();
            }
            (c - a) / (knots[i + 1].t - knots[i - 1].t)
        })
        .collect()
}

impl TrajectorySpec {
    pub fn sample(&self, t: f64) -> Kinematics {
        match &self.path {
            Path::Hermite(knots) => sample_hermite(knots, t),
            Path::Circle { center, radius, rate } => {
                let th = rate * t;
                let (s, c) = th.sin_cos();
                Kinematics {
                    position: center + Vec3::new(radius * c, radius * s, 0.0),
                    velocity: Vec3::new(-radius * rate * s, radius * rate * c, 0.0),
                    acceleration: Vec3::new(-radius * rate * rate * c, -radius * rate * rate * s, 0.0),
                    rotation: Rotation::about_z(th + std::f64::consts::FRAC_PI_2),
                    omega: Vec3::new(0.0, 0.0, *rate),
                }
            }
        }
    }

    pub fn imu_times(&self) -> Vec<f64> {
        let n = ((self.duration + 0.05) * self.imu_rate).ceil() as usize;
        (0..=n).map(|i| i as f64 / self.imu_rate).collect()
    }

    pub fn scan_times(&self) -> Vec<f64> {
        let period = 1.0 / self.scan_rate;
        let mut out = Vec::new();
        let mut k = 0usize;
        loop {
            let t = self.first_scan_end + k as f64 * period;
            if t > self.duration + 1e-9 {
                break;
            }
            out.push(t);
            k += 1;
        }
        out
    }
}

fn sample_hermite(knots: &[Knot], t: f64) -> Kinematics {
    let vel = knot_velocities(knots);
    let n = knots.len();
    let hold = |k: &Knot| Kinematics {
        position: k.position,
        velocity: Vec3::zeros(),
        acceleration: Vec3::zeros(),
        rotation: Rotation::about_z(k.yaw),
        omega: Vec3::zeros(),
    };
    if t <= knots[0].t {
        return hold(&knots[0]);
    }
    if t >= knots[n - 1].t {
        return hold(&knots[n - 1]);
    }
    let i = knots.partition_point(|k| k.t <= t) - 1;
    let (k0, k1) = (&knots[i], &knots[i + 1]);
    let h = k1.t - k0.t;
    let s = (t - k0.t) / h;
    let ctrl = [knot_vec(k0), vel[i] * h, V4::zeros(), V4::zeros(), vel[i + 1] * h, knot_vec(k1)];
    let pw = [1.0, s, s * s, s.powi(3), s.powi(4), s.powi(5)];
    let dpw = [0.0, 1.0, 2.0 * s, 3.0 * s * s, 4.0 * s.powi(3), 5.0 * s.powi(4)];
    let ddpw = [0.0, 0.0, 2.0, 6.0 * s, 12.0 * s * s, 20.0 * s.powi(3)];
    let (mut p, mut dp, mut ddp) = (V4::zeros(), V4::zeros(), V4::zeros());
    for (b, c) in QUINTIC_BASIS.iter().zip(&ctrl) {
        let (mut w, mut dw, mut ddw) = (0.0, 0.0, 0.0);
        for k in 0..6 {
            w += b[k] * pw[k];
            dw += b[k] * dpw[k];
            ddw += b[k] * ddpw[k];
        }
        p += c * w;
        dp += c * dw;
        ddp += c * ddw;
    }
    dp /= h;
    ddp /= h * h;
    Kinematics {
        position: p.xyz(),
        velocity: dp.xyz(),
        acceleration: ddp.xyz(),
        rotation: Rotation::about_z(p[3]),
        omega: Vec3::new(0.0, 0.0, dp[3]),
    }
}

/// IMU noise and bias model of a synthetic log.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuModel {
    pub gyro_bias: Vec3,
    pub accel_bias: Vec3,
    /// Continuous-time densities; per-sample deviation is `density·√rate`.
    pub gyro_noise: f64,
    pub accel_noise: f64,
    pub gyro_bias_walk: f64,
    pub accel_bias_walk: f64,
}

impl ImuModel {
    pub fn ideal() -> Self {
        Self {
            gyro_bias: Vec3::zeros(),
            accel_bias: Vec3::zeros(),
            gyro_noise: 0.0,
            accel_noise: 0.0,
            gyro_bias_walk: 0.0,
            accel_bias_walk: 0.0,
        }
    }

    pub fn realistic() -> Self {
        Self {
            gyro_bias: Vec3::new(0.002, -0.001, 0.0015),
            accel_bias: Vec3::new(0.03, -0.02, 0.04),
            gyro_noise: 2e-3,
            accel_noise: 2e-2,
            gyro_bias_walk: 1e-5,
            accel_bias_walk: 1e-4,
        }
    }
}

fn normal3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::from_fn(|_, _| Distribution::<f64>::sample(&StandardNormal, rng))
}

/// Specific force and angular rate along the trajectory, in the IMU frame.
pub fn synthesize_imu(traj: &TrajectorySpec, gravity: &Vec3, model: &ImuModel, rng: &mut ChaCha8Rng) -> Vec<ImuSample> {
    let dt = 1.0 / traj.imu_rate;
    let sg = model.gyro_noise / dt.sqrt();
    let sa = model.accel_noise / dt.sqrt();
    let (mut bg, mut ba) = (model.gyro_bias, model.accel_bias);
    traj.imu_times()
        .into_iter()
        .map(|t| {
            let k = traj.sample(t);
            let rt = k.rotation.transpose();
            let mut gyro = k.omega + bg;
            let mut accel = rt.rotate(&(k.acceleration - gravity)) + ba;
            if sg > 0.0 || sa > 0.0 {
                gyro += normal3(rng) * sg;
                accel += normal3(rng) * sa;
            }
            if model.gyro_bias_walk > 0.0 || model.accel_bias_walk > 0.0 {
                bg += normal3(rng) * (model.gyro_bias_walk * dt.sqrt());
                ba += normal3(rng) * (model.accel_bias_walk * dt.sqrt());
            }
            ImuSample { t, gyro, accel }
        })
        .collect()
}

/// One sweep ending at `t_end`. Azimuth column `k` of `n` fires at
/// `t_end − period·(n−1−k)/n`, so the last column has offset 0.
pub fn raycast_scan(
    world: &World,
    model: &LidarModel,
    t_end: f64,
    period: f64,
    pose_fn: impl Fn(f64) -> RigidTransform + Sync,
    rng: &mut ChaCha8Rng,
) -> LidarScan {
    let n = model.azimuths;
    let columns: Vec<Vec<(f64, Vec3, f64)>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let offset = -period * (n - 1 - k) as f64 / n as f64;
            let pose = pose_fn(t_end + offset);
            let az = std::f64::consts::TAU * k as f64 / n as f64;
            model
                .elevations
                .iter()
                .filter_map(|&el| {
                    let dir_l = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                    let dir_w = pose.rotation.rotate(&dir_l);
                    world.raycast(&pose.translation, &dir_w, model.max_range).map(|r| (offset, dir_l, r))
                })
                .collect()
        })
        .collect();
    let noisy = model.range_std > 0.0 || model.bearing_std > 0.0;
    let mut points = Vec::with_capacity(columns.iter().map(Vec::len).sum());
    for (offset, dir, r) in columns.into_iter().flatten() {
        let xyz = if noisy {
            let e1 = dir.cross(&Vec3::z()).try_normalize(1e-9).unwrap_or_else(Vec3::x);
            let e2 = dir.cross(&e1);
            let nz = normal3(rng);
            let d = (dir + (e1 * nz.x + e2 * nz.y) * model.bearing_std).normalize();
            d * (r + nz.z * model.range_std)
        } else {
            dir * r
        };
        points.push(ScanPoint { offset, xyz });
    }
    LidarScan { t_end, points }
}

pub const SCENARIOS: [&str; 4] = ["box_room", "corridor", "tunnel_transition", "waterway"];

fn hermite(knots: Vec<Knot>) -> TrajectorySpec {
    let duration = knots.last().map_or(0.0, |k| k.t);
    TrajectorySpec { path: Path::Hermite(knots), duration, imu_rate: 200.0, scan_rate: 10.0, first_scan_end: 0.5 }
}

/// Static at the origin until `t = 1`, then `moving` knots, then a final hold until `end`.
fn with_holds(moving: Vec<Knot>, end: f64) -> Vec<Knot> {
    let origin = Knot { t: 0.0, position: Vec3::zeros(), yaw: 0.0 };
    let mut knots = vec![origin, Knot { t: 1.0, ..origin }];
    knots.extend(moving);
    let last = *knots.last().expect("nonempty");
    knots.push(Knot { t: end, ..last });
    knots
}

fn box_room() -> (World, TrajectorySpec) {
    let mut w = World::default();
    let (lo, hi) = (Vec3::repeat(-5.0), Vec3::repeat(5.0));
    for a in 0..3 {
        w.add_rect(Rect::new(a, lo[a], lo, hi));
        w.add_rect(Rect::new(a, hi[a], lo, hi));
    }
    let moving = (1..=14)
        .map(|k| {
            let k = k as f64;
            Knot {
                t: 1.0 + 4.0 * k,
                position: Vec3::new(2.8 * (0.8 * k).sin(), 2.5 * (1.3 * k).sin(), 0.8 * (0.6 * k).sin()),
                yaw: 1.2 * (0.45 * k).sin(),
            }
        })
        .collect();
    (w, hermite(with_holds(moving, 60.0)))
}

fn corridor() -> (World, TrajectorySpec) {
    let mut w = World::default();
    let (lo, hi) = (Vec3::new(-5.0, -1.2, -1.0), Vec3::new(55.0, 1.2, 2.0));
    for a in 0..3 {
        w.add_rect(Rect::new(a, lo[a], lo, hi));
        w.add_rect(Rect::new(a, hi[a], lo, hi));
    }
    for k in 0..10 {
        let x = 6.0 * k as f64 - 2.0;
        w.add_box(Vec3::new(x, 0.95, -1.0), Vec3::new(x + 0.3, 1.2, 2.0));
        w.add_box(Vec3::new(x + 3.0, -1.2, -1.0), Vec3::new(x + 3.3, -0.95, 2.0));
    }
    let moving = (1..=8)
        .map(|k| {
            let k = k as f64;
            Knot {
                t: 1.0 + 5.0 * k,
                position: Vec3::new(5.5 * k, 0.3 * k.sin(), 0.2 * (0.7 * k).sin()),
                yaw: 0.3 * (0.9 * k).sin(),
            }
        })
        .collect();
    (w, hermite(with_holds(moving, 45.0)))
}

/// Half-widths of the alternating tunnel segments.
pub const TUNNEL_NARROW: f64 = 1.0;
pub const TUNNEL_WIDE: f64 = 15.0;
const TUNNEL_NARROW_LEN: f64 = 15.0;
const TUNNEL_WIDE_LEN: f64 = 40.0;
const TUNNEL_START: f64 = -5.0;
const TUNNEL_SEGMENTS: usize = 5;
const TUNNEL_FLOOR: f64 = -1.5;
const TUNNEL_NARROW_CEIL: f64 = 1.5;

/// `(x0, x1, half_width, ceiling)` of segment `i`; even segments are narrow.
fn tunnel_segment(i: usize) -> (f64, f64, f64, f64) {
    let pair = TUNNEL_NARROW_LEN + TUNNEL_WIDE_LEN;
    let x0 = TUNNEL_START + (i / 2) as f64 * pair + if i % 2 == 1 { TUNNEL_NARROW_LEN } else { 0.0 };
    if i.is_multiple_of(2) {
        (x0, x0 + TUNNEL_NARROW_LEN, TUNNEL_NARROW, TUNNEL_NARROW_CEIL)
    } else {
        (x0, x0 + TUNNEL_WIDE_LEN, TUNNEL_WIDE, 8.0)
    }
}

/// Whether `x` lies in a narrow tunnel segment.
pub fn tunnel_is_narrow(x: f64) -> bool {
    (0..TUNNEL_SEGMENTS).step_by(2).any(|i| {
        let (x0, x1, _, _) = tunnel_segment(i);
        x >= x0 && x < x1
    })
}

fn tunnel_transition() -> (World, TrajectorySpec) {
    let mut w = World::default();
    for i in 0..TUNNEL_SEGMENTS {
        let (x0, x1, half, ceil) = tunnel_segment(i);
        let lo = Vec3::new(x0, -half, TUNNEL_FLOOR);
        let hi = Vec3::new(x1, half, ceil);
        w.add_rect(Rect::new(2, TUNNEL_FLOOR, lo, hi));
        w.add_rect(Rect::new(2, ceil, lo, hi));
        w.add_rect(Rect::new(1, -half, lo, hi));
        w.add_rect(Rect::new(1, half, lo, hi));
        if i % 2 == 1 {
            // End faces of a wide segment around the narrow openings.
            let (n, nc) = (TUNNEL_NARROW, TUNNEL_NARROW_CEIL);
            for x in [x0, x1] {
                w.add_rect(Rect::new(0, x, Vec3::new(x, -half, TUNNEL_FLOOR), Vec3::new(x, -n, ceil)));
                w.add_rect(Rect::new(0, x, Vec3::new(x, n, TUNNEL_FLOOR), Vec3::new(x, half, ceil)));
                w.add_rect(Rect::new(0, x, Vec3::new(x, -n, nc), Vec3::new(x, n, ceil)));
            }
        }
    }
    let (first, last) = (TUNNEL_START, tunnel_segment(TUNNEL_SEGMENTS - 1).1);
    let cap = |x: f64| Rect::new(0, x, Vec3::new(x, -TUNNEL_NARROW, TUNNEL_FLOOR), Vec3::new(x, TUNNEL_NARROW, TUNNEL_NARROW_CEIL));
    w.add_rect(cap(first));
    w.add_rect(cap(last));
    let moving = (1..=11)
        .map(|k| {
            let k = k as f64;
            Knot {
                t: 1.0 + 5.0 * k,
                position: Vec3::new(10.0 * k, 0.3 * (1.1 * k).sin(), 0.2 * (0.8 * k).sin()),
                yaw: 0.25 * (0.7 * k).sin(),
            }
        })
        .collect();
    (w, hermite(with_holds(moving, 60.0)))
}

pub const WATERWAY_HALF_WIDTH: f64 = 6.0;
const WATER_LEVEL: f64 = -1.5;
const BANK_TOP: f64 = -0.5;
const BUSH_CUBES: usize = 60;

fn waterway() -> (World, TrajectorySpec) {
    let mut w = World::default();
    let (x0, x1) = (-30.0, 120.0);
    let c = WATERWAY_HALF_WIDTH;
    w.add_rect(Rect::new(2, WATER_LEVEL, Vec3::new(x0, -c, 0.0), Vec3::new(x1, c, 0.0)));
    w.open_regions.push(Aabb { min: Vec3::new(x0, -c, WATER_LEVEL - 0.01), max: Vec3::new(x1, c, WATER_LEVEL + 0.01) });
    for s in [-1.0, 1.0] {
        let (ya, yb) = if s < 0.0 { (-25.0, -c) } else { (c, 25.0) };
        w.add_rect(Rect::new(1, s * c, Vec3::new(x0, 0.0, WATER_LEVEL), Vec3::new(x1, 0.0, BANK_TOP)));
        w.add_rect(Rect::new(2, BANK_TOP, Vec3::new(x0, ya, 0.0), Vec3::new(x1, yb, 0.0)));
    }
    // Vegetation: bushes of small cubes along both banks; their voxels are not planar.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_f00d);
    let mut u = || rand::Rng::random_range(&mut rng, 0.0..1.0);
    let mut x = x0 + 1.0;
    while x < x1 - 1.0 {
        for s in [-1.0, 1.0] {
            let cy = s * (c + 0.3 + 1.5 * u());
            let cx = x + 0.5 * u();
            let mut rects = Vec::new();
            for _ in 0..BUSH_CUBES {
                let e = 0.08 + 0.17 * u();
                let lo = Vec3::new(cx + 1.6 * u(), cy - 0.8 + 1.6 * u(), BANK_TOP + 1.5 * u());
                let hi = lo + Vec3::repeat(e);
                for a in 0..3 {
                    rects.push(Rect::new(a, lo[a], lo, hi));
                    rects.push(Rect::new(a, hi[a], lo, hi));
                }
            }
            w.push_group(rects);
        }
        x += 2.0;
    }
    let moving = (1..=10)
        .map(|k| {
            let k = k as f64;
            Knot {
                t: 1.0 + 4.0 * k,
                position: Vec3::new(8.0 * k, 1.0 * (0.9 * k).sin(), 0.1 * k.sin()),
                yaw: 0.2 * (0.6 * k).sin(),
            }
        })
        .collect();
    (w, hermite(with_holds(moving, 44.0)))
}

/// Sensor used by a scenario; unknown names get the default model.
pub fn scenario_lidar(name: &str) -> LidarModel {
    match name {
        "box_room" => LidarModel::wide_fov(),
        _ => LidarModel::default(),
    }
}

pub fn scenario(name: &str) -> Result<(World, TrajectorySpec)> {
    match name {
        "box_room" => Ok(box_room()),
        "corridor" => Ok(corridor()),
        "tunnel_transition" => Ok(tunnel_transition()),
        "waterway" => Ok(waterway()),
        other => Err(Error::UnknownScenario(other.to_string())),
    }
}

/// LiDAR → IMU extrinsic used by every scenario.
pub fn scenario_extrinsic() -> RigidTransform {
    RigidTransform::new(Rotation::exp(&Vec3::new(0.06, -0.09, 0.02)), Vec3::new(0.05, 0.0, 0.1))
}

/// Filter configuration matching a generated log's sensor. Noise-free logs keep the nominal
/// filter noise so gating and weighting stay well conditioned.
pub fn scenario_config(_noise_free: bool) -> Config {
    let mut cfg = Config::default();
    let ext = scenario_extrinsic();
    let r = ext.rotation.log();
    cfg.sensor.extrinsic_rotation = [r.x, r.y, r.z];
    cfg.sensor.extrinsic_translation = [ext.translation.x, ext.translation.y, ext.translation.z];
    let lidar = LidarModel::default();
    cfg.sensor.range_std = lidar.range_std;
    cfg.sensor.bearing_std = lidar.bearing_std;
    cfg
}

#[derive(Debug, Clone, Default)]
pub struct SynthOptions {
    pub seed: u64,
    pub noise_free: bool,
    /// Truncates the trajectory (s) for quick runs.
    pub duration: Option<f64>,
}

pub const RNG_NAME: &str = "chacha8";

pub fn generate(name: &str, opts: &SynthOptions) -> Result<SensorLog> {
    let (world, mut traj) = scenario(name)?;
    if let Some(d) = opts.duration {
        traj.duration = traj.duration.min(d);
    }
    let lidar = if opts.noise_free { scenario_lidar(name).noise_free() } else { scenario_lidar(name) };
    let imu_model = if opts.noise_free { ImuModel::ideal() } else { ImuModel::realistic() };
    let gravity = Vec3::new(0.0, 0.0, -crate::GRAVITY);

    let mut imu_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let imu = synthesize_imu(&traj, &gravity, &imu_model, &mut imu_rng);

    let ext = scenario_extrinsic();
    let period = 1.0 / traj.scan_rate;
    let times = traj.scan_times();
    let scans = times
        .iter()
        .enumerate()
        .map(|(k, &t_end)| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(k as u64 + 1);
            raycast_scan(&world, &lidar, t_end, period, |t| traj.sample(t).pose() * ext, &mut rng)
        })
        .collect();
    let ground_truth = times.iter().map(|&t| TrajectoryRecord::from_pose(t, &traj.sample(t).pose())).collect();
    Ok(SensorLog {
        imu,
        scans,
        ground_truth: Some(ground_truth),
        meta: Some(LogMeta { scenario: name.to_string(), seed: opts.seed, rng: RNG_NAME.to_string(), noise_free: opts.noise_free }),
    })
}

/// Writes the log plus a matching `config.toml`.
pub fn generate_to_dir(name: &str, opts: &SynthOptions, dir: impl AsRef<std::path::Path>) -> Result<SensorLog> {
    let dir = dir.as_ref();
    let log = generate(name, opts)?;
    write_log(&log, dir)?;
    write_config(&scenario_config(opts.noise_free), dir.join("config.toml"))?;
    Ok(log)
}

/// Median range per scan, as a quick scene-scale summary.
pub fn median_ranges(log: &SensorLog) -> String {
    let mut out = String::from("t,median_range\n");
    for s in &log.scans {
        let mut r: Vec<f64> = s.points.iter().map(|p| p.xyz.norm()).collect();
        r.sort_by(f64::total_cmp);
        let m = if r.is_empty() { 0.0 } else { r[r.len() / 2] };
        let _ = writeln!(out, "{},{}", s.t_end, m);
    }
    out
}
