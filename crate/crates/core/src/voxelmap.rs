//! World-frame voxel hash map with per-voxel planes and pruned nearest-neighbor search.
//!
//! Each root voxel of edge `d_root` is split per axis into thirds. A query whose local
//! coordinate is in the middle third of an axis cannot have a neighbor closer than
//! `d_root/3` across that axis, so only the voxels sharing the query's outer thirds are
//! candidates (1, 2, 4 or 8 of them). With `τ_closest ≤ d_root/3` the pruned search returns
//! exactly what a scan of all 27 voxels would.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{SMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::io::{MapConfig, SearchStrategy};

pub type Mat6 = SMatrix<f64, 6, 6>;
pub type VoxelKey = [i64; 3];

pub fn voxel_key(p: &Vec3, d_root: f64) -> VoxelKey {
    crate::adavox::voxel_index(p, d_root)
}

/// Range noise along the ray, angular noise across it.
pub fn point_covariance_lidar(p: &Vec3, range_std: f64, bearing_std: f64) -> Mat3 {
    let r = p.norm();
    let w = p / r;
    let wwt = w * w.transpose();
    (Mat3::identity() - wwt) * (r * r * bearing_std * bearing_std) + wwt * (range_std * range_std)
}

/// Up to eight voxel keys, root first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidates {
    keys: [VoxelKey; 8],
    len: usize,
}

impl Candidates {
    pub fn as_slice(&self) -> &[VoxelKey] {
        &self.keys[..self.len]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub fn candidate_voxels(p: &Vec3, d_root: f64) -> Candidates {
    let root = voxel_key(p, d_root);
    let mut dirs = [0i64; 3];
    for a in 0..3 {
        let u = p[a] / d_root - (p[a] / d_root).floor();
        dirs[a] = if u < 1.0 / 3.0 {
            -1
        } else if u >= 2.0 / 3.0 {
            1
        } else {
            0
        };
    }
    let mut keys = [root; 8];
    let mut len = 1;
    for mask in 1u8..8 {
        let mut key = root;
        let mut ok = true;
        for a in 0..3 {
            if mask & (1 << a) != 0 {
                if dirs[a] == 0 {
                    ok = false;
                    break;
                }
                key[a] += dirs[a];
            }
        }
        if ok {
            keys[len] = key;
            len += 1;
        }
    }
    Candidates { keys, len }
}

/// Euclidean distance from `p` to the axis-aligned box of voxel `key`; 0 inside.
pub fn distance_to_voxel(p: &Vec3, key: &VoxelKey, d_root: f64) -> f64 {
    let mut sq = 0.0;
    for a in 0..3 {
        let lo = key[a] as f64 * d_root;
        let hi = lo + d_root;
        let excess = (lo - p[a]).max(0.0).max(p[a] - hi);
        sq += excess * excess;
    }
    sq.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapPoint {
    pub p: Vec3,
    pub cov: Mat3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub normal: Vec3,
    pub center: Vec3,
    /// Ascending eigenvalues of the scatter matrix divided by the point count.
    pub eigenvalues: Vec3,
    /// Covariance of `(n, q)`.
    pub cov: Mat6,
    pub valid: bool,
}

impl Default for Plane {
    fn default() -> Self {
        Self {
            normal: Vec3::z(),
            center: Vec3::zeros(),
            eigenvalues: Vec3::zeros(),
            cov: Mat6::zeros(),
            valid: false,
        }
    }
}

pub const MIN_PLANE_POINTS: usize = 5;
const EIGEN_GAP_MIN: f64 = 1e-9;

/// Fits a plane with first-order covariance of normal and centroid.
///
/// `valid` requires at least [`MIN_PLANE_POINTS`] points, `λ₁ < threshold`, and
/// `λ₂ − λ₁ > 1e-9`. The normal satisfies `nᵀq ≤ 0`, with ties resolved toward `+z`.
pub fn fit_plane(points: &[MapPoint], threshold: f64) -> Plane {
    let n = points.len();
    if n == 0 {
        return Plane::default();
    }
    let nf = n as f64;
    let center = points.iter().map(|m| m.p).sum::<Vec3>() / nf;
    let mut scatter = Mat3::zeros();
    for m in points {
        let d = m.p - center;
        scatter += d * d.transpose();
    }
    scatter /= nf;
    let eig = SymmetricEigen::new(scatter);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let lambda = Vec3::new(eig.eigenvalues[order[0]], eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    let mut u: [Vec3; 3] = [
        eig.eigenvectors.column(order[0]).into_owned(),
        eig.eigenvectors.column(order[1]).into_owned(),
        eig.eigenvectors.column(order[2]).into_owned(),
    ];
    let nq = u[0].dot(&center);
    let flip = if nq.abs() > 1e-12 {
        nq > 0.0
    } else {
        let first = u[0].iter().rev().find(|c| c.abs() > 1e-12).copied().unwrap_or(1.0);
        first < 0.0
    };
    if flip {
        u[0] = -u[0];
    }
    let normal = u[0];
    let valid = n >= MIN_PLANE_POINTS && lambda[0] < threshold && lambda[1] - lambda[0] > EIGEN_GAP_MIN;

    let mut cov = Mat6::zeros();
    if valid {
        for m in points {
            let d = m.p - center;
            let mut dn = Mat3::zeros();
            for k in 1..3 {
                let uk = u[k];
                dn += uk * (uk.dot(&d) * normal.transpose() + normal.dot(&d) * uk.transpose())
                    / (nf * (lambda[0] - lambda[k]));
            }
            let mut j = SMatrix::<f64, 6, 3>::zeros();
            j.fixed_view_mut::<3, 3>(0, 0).copy_from(&dn);
            j.fixed_view_mut::<3, 3>(3, 0).copy_from(&(Mat3::identity() / nf));
            cov += j * m.cov * j.transpose();
        }
        cov = 0.5 * (cov + cov.transpose());
    }
    Plane { normal, center, eigenvalues: lambda, cov, valid }
}

impl Plane {
    /// Variance of `nᵀ(p − q)` given the world covariance of `p`.
    pub fn residual_variance(&self, p: &Vec3, p_cov: &Mat3) -> f64 {
        let mut hv = SMatrix::<f64, 1, 6>::zeros();
        hv.fixed_view_mut::<1, 3>(0, 0).copy_from(&(p - self.center).transpose());
        hv.fixed_view_mut::<1, 3>(0, 3).copy_from(&(-self.normal.transpose()));
        (hv * self.cov * hv.transpose())[0] + (self.normal.transpose() * p_cov * self.normal)[0]
    }
}

#[derive(Debug, Clone, Default)]
pub struct RootVoxel {
    pub points: VecDeque<MapPoint>,
    pub plane: Plane,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SearchStats {
    pub accessed: usize,
    pub evaluated: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneMatch {
    pub key: VoxelKey,
    pub plane: Plane,
    pub residual: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMatch {
    pub point: MapPoint,
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct VoxelMap {
    pub root_size: f64,
    pub max_points: usize,
    pub plane_threshold: f64,
    voxels: HashMap<VoxelKey, RootVoxel>,
}

impl VoxelMap {
    pub fn new(cfg: &MapConfig) -> Self {
        Self {
            root_size: cfg.root_voxel_size,
            max_points: cfg.max_points_per_voxel,
            plane_threshold: cfg.plane_threshold,
            voxels: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn point_count(&self) -> usize {
        self.voxels.values().map(|v| v.points.len()).sum()
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&RootVoxel> {
        self.voxels.get(key)
    }

    /// Appends points (evicting the oldest beyond capacity) and refits every touched voxel
    /// once.
    pub fn insert(&mut self, points: &[MapPoint]) {
        let mut touched: Vec<VoxelKey> = Vec::new();
        for m in points {
            let key = voxel_key(&m.p, self.root_size);
            let voxel = self.voxels.entry(key).or_default();
            if voxel.points.len() >= self.max_points {
                voxel.points.pop_front();
            }
            voxel.points.push_back(*m);
            touched.push(key);
        }
        touched.sort_unstable();
        touched.dedup();
        for key in touched {
            let voxel = self.voxels.get_mut(&key).expect("touched voxel exists");
            let pts = voxel.points.make_contiguous();
            voxel.plane = fit_plane(pts, self.plane_threshold);
        }
    }

    /// Drops voxels whose center lies outside the axis-aligned cube of half-width `radius`.
    pub fn crop(&mut self, center: &Vec3, radius: f64) {
        let d = self.root_size;
        self.voxels.retain(|k, _| {
            (0..3).all(|a| ((k[a] as f64 + 0.5) * d - center[a]).abs() <= radius)
        });
    }

    /// 3σ-gated plane among the candidates with the smallest normalized residual.
    pub fn match_plane(&self, p: &Vec3, p_cov: &Mat3, candidates: &[VoxelKey]) -> Option<PlaneMatch> {
        let mut best: Option<(f64, PlaneMatch)> = None;
        for key in candidates {
            let Some(voxel) = self.voxels.get(key) else { continue };
            let plane = &voxel.plane;
            if !plane.valid {
                continue;
            }
            let z = plane.normal.dot(&(p - plane.center));
            let var = plane.residual_variance(p, p_cov);
            if !(z * z < 9.0 * var) {
                continue;
            }
            let score = z * z / var;
            if best.as_ref().is_none_or(|b| score < b.0) {
                best = Some((score, PlaneMatch { key: *key, plane: *plane, residual: z, variance: var }));
            }
        }
        best.map(|b| b.1)
    }

    fn scan_voxel(&self, key: &VoxelKey, p: &Vec3, best: &mut Option<PointMatch>, d_closest: &mut f64, stats: &mut SearchStats) {
        let Some(voxel) = self.voxels.get(key) else { return };
        stats.accessed += 1;
        stats.evaluated += voxel.points.len();
        for m in &voxel.points {
            let dist = (p - m.p).norm();
            if dist < *d_closest {
                *d_closest = dist;
                *best = Some(PointMatch { point: *m, distance: dist });
            }
        }
    }

    /// Nearest stored point closer than `tau`, scanning a neighbor only if its box can
    /// still beat the current best.
    pub fn nn_search_pruned(&self, p: &Vec3, candidates: &[VoxelKey], tau: f64) -> (Option<PointMatch>, SearchStats) {
        let mut stats = SearchStats::default();
        let mut best = None;
        let mut d_closest = tau;
        for (i, key) in candidates.iter().enumerate() {
            if i > 0 && distance_to_voxel(p, key, self.root_size) >= d_closest {
                continue;
            }
            self.scan_voxel(key, p, &mut best, &mut d_closest, &mut stats);
        }
        (best, stats)
    }

    /// Nearest stored point closer than `tau` over a fixed neighborhood without pruning.
    pub fn nn_search_exhaustive(&self, p: &Vec3, offsets: &[[i64; 3]], tau: f64) -> (Option<PointMatch>, SearchStats) {
        let root = voxel_key(p, self.root_size);
        let mut stats = SearchStats::default();
        let mut best = None;
        let mut d_closest = tau;
        for o in offsets {
            let key = [root[0] + o[0], root[1] + o[1], root[2] + o[2]];
            self.scan_voxel(&key, p, &mut best, &mut d_closest, &mut stats);
        }
        (best, stats)
    }

    pub fn nn_search(&self, p: &Vec3, strategy: SearchStrategy, tau: f64) -> (Option<PointMatch>, SearchStats) {
        match strategy {
            SearchStrategy::Pruned => self.nn_search_pruned(p, candidate_voxels(p, self.root_size).as_slice(), tau),
            SearchStrategy::All26 => self.nn_search_exhaustive(p, &NEIGHBORS_27, tau),
            SearchStrategy::Face6 => self.nn_search_exhaustive(p, &NEIGHBORS_7, tau),
        }
    }

    pub fn format_dump(&self) -> String {
        let mut keys: Vec<&VoxelKey> = self.voxels.keys().collect();
        keys.sort_unstable();
        let mut out = String::from("kx,ky,kz,nx,ny,nz,qx,qy,qz,lambda1,valid,count\n");
        for k in keys {
            let v = &self.voxels[k];
            let (n, q) = (v.plane.normal, v.plane.center);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                k[0], k[1], k[2], n.x, n.y, n.z, q.x, q.y, q.z, v.plane.eigenvalues[0], v.plane.valid as u8, v.points.len()
            );
        }
        out
    }

    pub fn write_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.format_dump()).map_err(|e| Error::io(path, e))
    }
}

/// Root first, then the other 26 neighbors.
pub const NEIGHBORS_27: [[i64; 3]; 27] = {
    let mut out = [[0i64; 3]; 27];
    let mut n = 1;
    let mut i = 0;
    while i < 27 {
        let o = [(i / 9) as i64 - 1, ((i / 3) % 3) as i64 - 1, (i % 3) as i64 - 1];
        if !(o[0] == 0 && o[1] == 0 && o[2] == 0) {
            out[n] = o;
            n += 1;
        }
        i += 1;
    }
    out
};

/// Root first, then the 6 face neighbors.
pub const NEIGHBORS_7: [[i64; 3]; 7] =
    [[0, 0, 0], [-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];
