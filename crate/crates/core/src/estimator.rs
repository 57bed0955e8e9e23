//! Hybrid point-to-plane / point-to-point iterated error-state Kalman update.
//!
//! Points that pass the 3σ plane gate contribute a signed plane distance; the rest fall
//! back to the scalar norm of the offset to their nearest map point, inflated by the
//! discretization variance of the search that found it. Both residuals depend on the pose
//! only, so the information matrix is accumulated as a 6×6 block.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{SMatrix, SymmetricEigen, Vector6};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{idx, skew, so3_right_jacobian_inv, Mat18, Mat3, RigidTransform, TangentVector18, Vec3};
use crate::io::Config;
use crate::preprocess::{NavState, StateCovariance};
use crate::voxelmap::{candidate_voxels, point_covariance_lidar, MapPoint, Plane, PointMatch, SearchStats, VoxelMap};

pub type Mat6 = SMatrix<f64, 6, 6>;

pub const VARIANCE_FLOOR: f64 = 1e-12;
/// Point residuals shorter than this have no usable direction.
pub const MIN_POINT_RESIDUAL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneTerm {
    pub z: f64,
    /// Nonzero part of the 1×18 Jacobian: position then rotation columns.
    pub h: Vector6<f64>,
    pub r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointTerm {
    pub z: f64,
    pub h: Vector6<f64>,
    pub r_norm: f64,
    pub r_disc: f64,
    pub r: f64,
    pub stats: SearchStats,
}

/// A scalar measurement row, independent of its metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Row {
    pub z: f64,
    pub h: Vector6<f64>,
    pub r: f64,
}

impl PlaneTerm {
    pub fn row(&self) -> Row {
        Row { z: self.z, h: self.h, r: self.r }
    }
}

impl PointTerm {
    pub fn row(&self) -> Row {
        Row { z: self.z, h: self.h, r: self.r }
    }
}

pub fn full_row(h: &Vector6<f64>) -> SMatrix<f64, 1, 18> {
    let mut out = SMatrix::<f64, 1, 18>::zeros();
    out.fixed_view_mut::<1, 6>(0, 0).copy_from(&h.transpose());
    out
}

/// World point and IMU-frame point of a LiDAR point under state `x`.
fn transform(x: &NavState, extrinsic: &RigidTransform, p_lidar: &Vec3) -> (Vec3, Vec3) {
    let p_imu = extrinsic.apply(p_lidar);
    (x.pose().apply(&p_imu), p_imu)
}

/// Rotation of a LiDAR-frame vector into the world frame.
fn lidar_to_world(x: &NavState, extrinsic: &RigidTransform) -> Mat3 {
    x.rotation.matrix() * extrinsic.rotation.matrix()
}

/// Signed distance to the plane with its pose Jacobian and propagated variance.
///
/// The rotation columns are `−nᵀ·R·[ᴵR_L·ᴸp + ᴵt_L]×`, the derivative with respect to a
/// right perturbation of the IMU attitude.
pub fn plane_term(p_lidar: &Vec3, cov_lidar: &Mat3, plane: &Plane, x: &NavState, extrinsic: &RigidTransform) -> PlaneTerm {
    let (p_w, p_imu) = transform(x, extrinsic, p_lidar);
    let n = plane.normal;
    let z = n.dot(&(p_w - plane.center));
    let rot = -(n.transpose() * x.rotation.matrix() * skew(&p_imu));
    let mut h = Vector6::zeros();
    h.fixed_rows_mut::<3>(0).copy_from(&n);
    h.fixed_rows_mut::<3>(3).copy_from(&rot.transpose());
    let rl = lidar_to_world(x, extrinsic);
    let r = plane.residual_variance(&p_w, &(rl * cov_lidar * rl.transpose())).max(VARIANCE_FLOOR);
    PlaneTerm { z, h, r }
}

/// Variance added to a nearest-neighbor residual by map sparsity.
pub fn discretization_variance(stats: &SearchStats, d_root: f64) -> f64 {
    if stats.evaluated == 0 {
        return 0.0;
    }
    stats.accessed as f64 * d_root * d_root / stats.evaluated as f64
}

/// Norm of the offset to the matched map point; `None` when the offset is too short to
/// define a direction.
#[allow(clippy::too_many_arguments)]
pub fn point_term(
    p_lidar: &Vec3,
    cov_lidar: &Mat3,
    matched: &PointMatch,
    stats: SearchStats,
    x: &NavState,
    extrinsic: &RigidTransform,
    cfg: &Config,
) -> Option<PointTerm> {
    let (p_w, p_imu) = transform(x, extrinsic, p_lidar);
    let d = p_w - matched.point.p;
    let z = d.norm();
    if z <= MIN_POINT_RESIDUAL {
        return None;
    }
    let u = d / z;
    let rot = -(u.transpose() * x.rotation.matrix() * skew(&p_imu));
    let mut h = Vector6::zeros();
    h.fixed_rows_mut::<3>(0).copy_from(&u);
    h.fixed_rows_mut::<3>(3).copy_from(&rot.transpose());
    let rl = lidar_to_world(x, extrinsic);
    let cov = rl * cov_lidar * rl.transpose() + matched.point.cov;
    let r_norm = (u.transpose() * cov * u)[0];
    let r_disc = if cfg.estimator.discretization_variance {
        discretization_variance(&stats, cfg.map.root_voxel_size)
    } else {
        0.0
    };
    let r = (cfg.estimator.lambda_po * (r_norm + r_disc)).max(VARIANCE_FLOOR);
    Some(PointTerm { z, h, r_norm, r_disc, r, stats })
}

/// `∂((x^ℓ ⊞ δ) ⊟ x̂)/∂δ` at `δ = 0`.
pub fn compute_j(x_iter: &NavState, x_prior: &NavState) -> Mat18 {
    let theta = (x_prior.rotation.transpose() * x_iter.rotation).log();
    let mut j = Mat18::identity();
    j.fixed_view_mut::<3, 3>(idx::ROT, idx::ROT).copy_from(&so3_right_jacobian_inv(&theta));
    j
}

/// Information matrix `Σ hᵀ r⁻¹ h` of the pose block.
pub fn information(rows: &[Row]) -> Mat6 {
    rows.iter().fold(Mat6::zeros(), |acc, t| acc + t.h * t.h.transpose() / t.r)
}

/// `λ_max / λ_min` of the pose-block information; `+∞` when rank deficient.
pub fn condition_number(rows: &[Row]) -> f64 {
    let eig = SymmetricEigen::new(information(rows)).eigenvalues;
    let min = eig.min();
    if min < 1e-12 {
        f64::INFINITY
    } else {
        eig.max() / min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Terms {
    pub plane: usize,
    pub point: usize,
}

/// Correspondences and rows for one linearization point, planes first.
#[derive(Debug, Clone, Default)]
pub struct TermSet {
    pub planes: Vec<PlaneTerm>,
    pub points: Vec<PointTerm>,
    /// Searches run for plane-gate failures, including those that found nothing.
    pub searches: Vec<SearchStats>,
}

impl TermSet {
    pub fn rows(&self) -> Vec<Row> {
        self.planes.iter().map(PlaneTerm::row).chain(self.points.iter().map(PointTerm::row)).collect()
    }

    pub fn plane_rows(&self) -> Vec<Row> {
        self.planes.iter().map(PlaneTerm::row).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.planes.is_empty() && self.points.is_empty()
    }
}

enum Found {
    Plane(PlaneTerm),
    Point(Option<PointTerm>, SearchStats),
    Nothing,
}

/// Builds all residual terms of `points` (LiDAR frame) against `map` at state `x`.
pub fn build_terms(points: &[Vec3], x: &NavState, map: &VoxelMap, cfg: &Config) -> TermSet {
    let extrinsic = cfg.sensor.extrinsic();
    let rl = lidar_to_world(x, &extrinsic);
    let tau = cfg.map.closest_threshold();
    let found: Vec<Found> = points
        .par_iter()
        .map(|p| {
            let cov_l = point_covariance_lidar(p, cfg.sensor.range_std, cfg.sensor.bearing_std);
            let (p_w, _) = transform(x, &extrinsic, p);
            let cands = candidate_voxels(&p_w, map.root_size);
            let cov_w = rl * cov_l * rl.transpose();
            if let Some(m) = map.match_plane(&p_w, &cov_w, cands.as_slice()) {
                return Found::Plane(plane_term(p, &cov_l, &m.plane, x, &extrinsic));
            }
            if !cfg.estimator.hybrid {
                return Found::Nothing;
            }
            let (hit, stats) = map.nn_search(&p_w, cfg.map.search, tau);
            let term = hit.and_then(|m| point_term(p, &cov_l, &m, stats, x, &extrinsic, cfg));
            Found::Point(term, stats)
        })
        .collect();
    let mut set = TermSet::default();
    for f in found {
        match f {
            Found::Plane(t) => set.planes.push(t),
            Found::Point(t, s) => {
                set.searches.push(s);
                set.points.extend(t);
            }
            Found::Nothing => {}
        }
    }
    set
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateResult {
    pub state: NavState,
    pub cov: StateCovariance,
    pub iterations: usize,
    /// `(N_pl, N_po)` per iteration.
    pub counts: Vec<Terms>,
    pub condition: f64,
    pub condition_plane_only: f64,
    pub accessed_mean: f64,
    pub evaluated_mean: f64,
    /// No correspondences at any iteration; the prior was returned.
    pub degenerate: bool,
    /// Non-finite arithmetic; the prior was returned.
    pub rejected: bool,
}

impl UpdateResult {
    fn prior(x: &NavState, p: &StateCovariance) -> Self {
        Self {
            state: *x,
            cov: *p,
            iterations: 0,
            counts: Vec::new(),
            condition: f64::INFINITY,
            condition_plane_only: f64::INFINITY,
            accessed_mean: 0.0,
            evaluated_mean: 0.0,
            degenerate: true,
            rejected: false,
        }
    }

    pub fn final_counts(&self) -> Terms {
        self.counts.last().copied().unwrap_or_default()
    }
}

fn pose_embed(a: &Mat6) -> Mat18 {
    let mut out = Mat18::zeros();
    out.fixed_view_mut::<6, 6>(0, 0).copy_from(a);
    out
}

fn invert_spd(m: &Mat18) -> Option<Mat18> {
    m.cholesky().map(|c| c.inverse()).or_else(|| m.try_inverse())
}

/// Iterated MAP update of the prior `(x̂, P̂)` with the scan `points` (LiDAR frame,
/// deskewed to the state time).
pub fn iterated_update(x_prior: &NavState, p_prior: &StateCovariance, points: &[Vec3], map: &VoxelMap, cfg: &Config) -> UpdateResult {
    let mut x = *x_prior;
    let mut result = UpdateResult::prior(x_prior, p_prior);
    let mut last: Option<(Mat18, Mat18)> = None;

    for _ in 0..cfg.estimator.max_iterations.max(1) {
        let terms = build_terms(points, &x, map, cfg);
        result.counts.push(Terms { plane: terms.planes.len(), point: terms.points.len() });
        if terms.is_empty() {
            break;
        }
        let rows = terms.rows();
        let mut info6 = Mat6::zeros();
        let mut b6 = Vector6::zeros();
        for r in &rows {
            info6 += r.h * r.h.transpose() / r.r;
            b6 += r.h * (r.z / r.r);
        }
        if !info6.iter().chain(b6.iter()).all(|v| v.is_finite()) {
            log::warn!("non-finite residuals; scan rejected");
            return UpdateResult { rejected: true, ..UpdateResult::prior(x_prior, p_prior) };
        }
        let j = compute_j(&x, x_prior);
        let Some(j_inv) = j.try_inverse() else {
            return UpdateResult { rejected: true, ..UpdateResult::prior(x_prior, p_prior) };
        };
        let p_iter = j_inv * p_prior * j_inv.transpose();
        let info = pose_embed(&info6);
        let Some(p_inv) = invert_spd(&p_iter) else {
            return UpdateResult { rejected: true, ..UpdateResult::prior(x_prior, p_prior) };
        };
        let Some(m_inv) = invert_spd(&(info + p_inv)) else {
            return UpdateResult { rejected: true, ..UpdateResult::prior(x_prior, p_prior) };
        };
        let mut b = TangentVector18::zeros();
        b.fixed_rows_mut::<6>(0).copy_from(&b6);
        let kh = m_inv * info;
        let delta = -(m_inv * b) - (Mat18::identity() - kh) * j_inv * x.boxminus(x_prior);
        if !delta.iter().all(|v| v.is_finite()) {
            log::warn!("non-finite update; scan rejected");
            return UpdateResult { rejected: true, ..UpdateResult::prior(x_prior, p_prior) };
        }
        x = x.boxplus(&delta);
        result.iterations += 1;
        result.condition = condition_number(&rows);
        result.condition_plane_only = condition_number(&terms.plane_rows());
        let n = terms.searches.len().max(1) as f64;
        result.accessed_mean = terms.searches.iter().map(|s| s.accessed as f64).sum::<f64>() / n;
        result.evaluated_mean = terms.searches.iter().map(|s| s.evaluated as f64).sum::<f64>() / n;
        last = Some((kh, p_iter));
        if delta.norm() < cfg.estimator.converge_threshold {
            break;
        }
    }

    let Some((kh, p_iter)) = last else {
        return result;
    };
    let p = (Mat18::identity() - kh) * p_iter;
    result.cov = 0.5 * (p + p.transpose());
    result.state = x;
    result.degenerate = false;
    result
}

/// Inserts the merge-resolution scan into the map at state `x`.
pub fn integrate_scan(points: &[Vec3], x: &NavState, map: &mut VoxelMap, cfg: &Config) {
    let extrinsic = cfg.sensor.extrinsic();
    let pose = x.pose() * extrinsic;
    let rl = lidar_to_world(x, &extrinsic);
    let batch: Vec<MapPoint> = points
        .iter()
        .map(|p| {
            let cov = point_covariance_lidar(p, cfg.sensor.range_std, cfg.sensor.bearing_std);
            MapPoint { p: pose.apply(p), cov: rl * cov * rl.transpose() }
        })
        .collect();
    map.insert(&batch);
}

/// One row of the estimator trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorDiagnostics {
    pub t: f64,
    pub iterations: usize,
    pub n_plane: usize,
    pub n_point: usize,
    pub condition: f64,
    pub accessed_mean: f64,
    pub evaluated_mean: f64,
    pub condition_plane_only: f64,
}

impl EstimatorDiagnostics {
    pub fn from_update(t: f64, u: &UpdateResult) -> Self {
        let c = u.final_counts();
        Self {
            t,
            iterations: u.iterations,
            n_plane: c.plane,
            n_point: c.point,
            condition: u.condition,
            accessed_mean: u.accessed_mean,
            evaluated_mean: u.evaluated_mean,
            condition_plane_only: u.condition_plane_only,
        }
    }
}

pub const ESTIMATOR_CSV_HEADER: &str = "t,iters,Npl,Npo,cond,Naccessed_mean,Neval_mean,cond_pl";

pub fn format_estimator_csv(rows: &[EstimatorDiagnostics]) -> String {
    let mut out = String::with_capacity(64 + rows.len() * 96);
    out.push_str(ESTIMATOR_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.t, r.iterations, r.n_plane, r.n_point, r.condition, r.accessed_mean, r.evaluated_mean, r.condition_plane_only
        );
    }
    out
}

pub fn write_estimator_csv(rows: &[EstimatorDiagnostics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_estimator_csv(rows)).map_err(|e| Error::io(path, e))
}
