//! Rotation and rigid-transform algebra plus the navigation-state manifold.
//!
//! The error state is an 18-vector laid out as
//!
//! ```text
//!  [0..3]   δt    position (m)
//!  [3..6]   δr    rotation (rad, right perturbation: R ⊞ δr = R·Exp(δr))
//!  [6..9]   δv    velocity (m/s)
//!  [9..12]  δb_g  gyro bias (rad/s)
//!  [12..15] δb_a  accel bias (m/s²)
//!  [15..18] δg    gravity (m/s²)
//! ```

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type TangentVector18 = SVector<f64, 18>;
pub type Mat18 = SMatrix<f64, 18, 18>;

/// Block offsets into [`TangentVector18`].
pub mod idx {
    pub const POS: usize = 0;
    pub const ROT: usize = 3;
    pub const VEL: usize = 6;
    pub const BG: usize = 9;
    pub const BA: usize = 12;
    pub const GRAV: usize = 15;
}

const SMALL_ANGLE: f64 = 1e-8;
const NEAR_PI: f64 = 1e-6;

/// Skew-symmetric matrix such that `skew(v) * u == v.cross(&u)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// A proper orthonormal 3×3 rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(Mat3);

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self(Mat3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Self(m)
    }

    /// Projects an arbitrary matrix onto SO(3) (nearest rotation in Frobenius norm).
    pub fn from_matrix_orthonormalized(m: Mat3) -> Self {
        let svd = m.svd(true, true);
        let u = svd.u.expect("svd u");
        let v_t = svd.v_t.expect("svd v_t");
        let mut r = u * v_t;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * v_t;
        }
        Self(r)
    }

    pub fn exp(w: &Vec3) -> Self {
        Self(so3_exp(w))
    }

    pub fn log(&self) -> Vec3 {
        so3_log(&self.0)
    }

    pub fn about_z(yaw: f64) -> Self {
        Self::exp(&Vec3::new(0.0, 0.0, yaw))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    pub fn angle(&self) -> f64 {
        self.log().norm()
    }

    /// Unit quaternion (used only for trajectory output).
    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.0)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Self(q.to_rotation_matrix().into_inner())
    }

    /// Max absolute deviation of `R·Rᵀ` from identity and of `det(R)` from one.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.0 * self.0.transpose() - Mat3::identity()).abs().max();
        e.max((self.0.determinant() - 1.0).abs())
    }
}

impl std::ops::Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl std::ops::Mul<Vec3> for Rotation {
    type Output = Vec3;
    fn mul(self, rhs: Vec3) -> Vec3 {
        self.0 * rhs
    }
}

/// Rodrigues formula with a second-order Taylor fallback near zero.
pub fn so3_exp(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(w);
    if theta < SMALL_ANGLE {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Mat3::identity() + a * k + b * k * k
}

/// Inverse of [`so3_exp`]. Angles within 1e-6 of π use axis extraction from `R + Rᵀ`.
pub fn so3_log(r: &Mat3) -> Vec3 {
    let vee = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = (0.5 * vee.norm()).atan2(cos);
    if theta < SMALL_ANGLE {
        return 0.5 * vee;
    }
    if std::f64::consts::PI - theta < NEAR_PI {
        // R + Rᵀ = 2I + 2(1 - cos θ)·(k kᵀ - I) ≈ 2·(2k kᵀ - I) at θ = π.
        let s = (r + r.transpose()) * 0.5 + Mat3::identity();
        let col = (0..3)
            .max_by(|&a, &b| s[(a, a)].total_cmp(&s[(b, b)]))
            .unwrap_or(0);
        let mut axis: Vec3 = s.column(col).into();
        axis /= axis.norm();
        // Resolve the sign with the (small) antisymmetric part when available.
        if axis.dot(&vee) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    vee * (theta / (2.0 * theta.sin()))
}

/// Right Jacobian of SO(3).
pub fn so3_right_jacobian(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let k = skew(w);
    if theta2 < 1e-10 {
        return Mat3::identity() - 0.5 * k + k * k / 6.0;
    }
    let theta = theta2.sqrt();
    Mat3::identity() - (1.0 - theta.cos()) / theta2 * k
        + (theta - theta.sin()) / (theta2 * theta) * k * k
}

/// Inverse of the right Jacobian of SO(3).
pub fn so3_right_jacobian_inv(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let k = skew(w);
    if theta2 < 1e-10 {
        return Mat3::identity() + 0.5 * k + k * k / 12.0;
    }
    let theta = theta2.sqrt();
    let coef = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Mat3::identity() + 0.5 * k + coef * k * k
}

/// Rigid transform `p ↦ R·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RigidTransform {
    pub rotation: Rotation,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn new(rotation: Rotation, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Rotation::identity(), translation: Vec3::zeros() }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.matrix() * p + self.translation
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.matrix() * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt.matrix() * self.translation) }
    }

    /// Screw-linear interpolation: `a ⊕ s·(a⁻¹b)` with rotation via exp/log and linear translation.
    pub fn interpolate(a: &RigidTransform, b: &RigidTransform, s: f64) -> RigidTransform {
        let rel = a.rotation.transpose() * b.rotation;
        let rot = a.rotation * Rotation::exp(&(rel.log() * s));
        RigidTransform { rotation: rot, translation: a.translation + (b.translation - a.translation) * s }
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;
    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

/// The 18-DoF navigation state on SO(3) × R¹⁵.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    pub position: Vec3,
    pub rotation: Rotation,
    pub velocity: Vec3,
    pub gyro_bias: Vec3,
    pub accel_bias: Vec3,
    pub gravity: Vec3,
}

impl Default for NavState {
    fn default() -> Self {
        Self {
            position: Vec3::zeros(),
            rotation: Rotation::identity(),
            velocity: Vec3::zeros(),
            gyro_bias: Vec3::zeros(),
            accel_bias: Vec3::zeros(),
            gravity: Vec3::new(0.0, 0.0, -crate::GRAVITY),
        }
    }
}

impl NavState {
    /// World ← IMU pose.
    pub fn pose(&self) -> RigidTransform {
        RigidTransform::new(self.rotation, self.position)
    }

    pub fn boxplus(&self, delta: &TangentVector18) -> NavState {
        boxplus(self, delta)
    }

    pub fn boxminus(&self, other: &NavState) -> TangentVector18 {
        boxminus(self, other)
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.rotation.matrix().iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.gyro_bias.iter().all(|v| v.is_finite())
            && self.accel_bias.iter().all(|v| v.is_finite())
            && self.gravity.iter().all(|v| v.is_finite())
    }
}

fn block(delta: &TangentVector18, at: usize) -> Vec3 {
    delta.fixed_rows::<3>(at).into_owned()
}

/// `x ⊞ δ`: rotation composes on the right, every other block adds.
pub fn boxplus(x: &NavState, delta: &TangentVector18) -> NavState {
    NavState {
        position: x.position + block(delta, idx::POS),
        rotation: x.rotation * Rotation::exp(&block(delta, idx::ROT)),
        velocity: x.velocity + block(delta, idx::VEL),
        gyro_bias: x.gyro_bias + block(delta, idx::BG),
        accel_bias: x.accel_bias + block(delta, idx::BA),
        gravity: x.gravity + block(delta, idx::GRAV),
    }
}

/// `y ⊟ x`, the exact inverse of [`boxplus`].
pub fn boxminus(y: &NavState, x: &NavState) -> TangentVector18 {
    let mut d = TangentVector18::zeros();
    d.fixed_rows_mut::<3>(idx::POS).copy_from(&(y.position - x.position));
    d.fixed_rows_mut::<3>(idx::ROT).copy_from(&(x.rotation.transpose() * y.rotation).log());
    d.fixed_rows_mut::<3>(idx::VEL).copy_from(&(y.velocity - x.velocity));
    d.fixed_rows_mut::<3>(idx::BG).copy_from(&(y.gyro_bias - x.gyro_bias));
    d.fixed_rows_mut::<3>(idx::BA).copy_from(&(y.accel_bias - x.accel_bias));
    d.fixed_rows_mut::<3>(idx::GRAV).copy_from(&(y.gravity - x.gravity));
    d
}
