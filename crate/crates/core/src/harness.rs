//! Pipeline orchestration, trajectory metrics and ablation runners.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::warn;
use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::Serialize;

use crate::adavox::{format_control_csv, ControlDiagnostics, Voxelizer};
use crate::error::{Error, Result};
use crate::estimator::{format_estimator_csv, integrate_scan, iterated_update, EstimatorDiagnostics};
use crate::geometry::{Rotation, Vec3};
use crate::io::{format_trajectory, Config, ControllerStrategy, SearchStrategy, SensorLog, TrajectoryRecord};
use crate::preprocess::{deskew, forward_propagate, initialize};
use crate::voxelmap::VoxelMap;

/// Timestamp association tolerance for trajectory metrics (s).
pub const ASSOCIATION_TOLERANCE: f64 = 0.01;
/// Default RTE segment length (m).
pub const RTE_DELTA: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTiming {
    pub t: f64,
    pub ms: f64,
}

/// Per-frame streams of one pipeline run. The bootstrap frame has no estimator row;
/// an empty scan has no control row.
#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub trajectory: Vec<TrajectoryRecord>,
    pub control: Vec<ControlDiagnostics>,
    pub estimator: Vec<EstimatorDiagnostics>,
    pub timing: Vec<FrameTiming>,
    pub rejected_scans: usize,
    pub scan_period: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub frames: usize,
    pub rejected_scans: usize,
    pub ate_rmse: Option<f64>,
    pub rte_rmse: Option<f64>,
    pub frame_ms_mean: f64,
    pub frame_ms_p95: f64,
    pub iae: f64,
    pub overshoot: f64,
    pub condition_mean: f64,
    pub accessed_mean: f64,
    pub evaluated_mean: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let i = ((v.len() - 1) as f64 * q).round() as usize;
    v[i]
}

impl RunReport {
    /// Every field is recomputed from the per-frame streams.
    pub fn summary(&self, ground_truth: Option<&[TrajectoryRecord]>) -> Summary {
        let (ate_rmse, rte_rmse) = match ground_truth {
            Some(gt) => (ate(&self.trajectory, gt).ok(), rte(&self.trajectory, gt, RTE_DELTA).ok()),
            None => (None, None),
        };
        let ms: Vec<f64> = self.timing.iter().map(|f| f.ms).collect();
        Summary {
            frames: self.trajectory.len(),
            rejected_scans: self.rejected_scans,
            ate_rmse,
            rte_rmse,
            frame_ms_mean: mean(ms.iter().copied()),
            frame_ms_p95: percentile(ms, 0.95),
            iae: iae(&self.control, self.scan_period),
            overshoot: overshoot(&self.control),
            condition_mean: mean(self.estimator.iter().map(|e| e.condition).filter(|c| c.is_finite())),
            accessed_mean: mean(self.estimator.iter().map(|e| e.accessed_mean)),
            evaluated_mean: mean(self.estimator.iter().map(|e| e.evaluated_mean)),
        }
    }
}

/// Nominal scan period: median spacing of scan end times, 0.1 s for fewer than two scans.
fn scan_period(log: &SensorLog) -> f64 {
    let gaps: Vec<f64> = log.scans.windows(2).map(|w| w[1].t_end - w[0].t_end).collect();
    if gaps.is_empty() {
        0.1
    } else {
        percentile(gaps, 0.5)
    }
}

pub fn run_pipeline(log: &SensorLog, cfg: &Config) -> Result<RunReport> {
    let mut report = RunReport { scan_period: scan_period(log), ..RunReport::default() };
    let Some(first) = log.scans.first() else {
        return Ok(report);
    };
    let extrinsic = cfg.sensor.extrinsic();
    let t0 = first.t_start();
    let init_samples: Vec<_> = log.imu.iter().copied().filter(|s| s.t <= t0).collect();
    let (mut x, mut cov) = initialize(&init_samples, &cfg.init)?;
    let mut t_state = t0;
    let mut voxelizer = Voxelizer::new(&cfg.adavox);
    let mut map = VoxelMap::new(&cfg.map);
    let mut bootstrapped = false;

    for scan in &log.scans {
        let clock = Instant::now();
        let Some(imu) = log.imu_between(t_state, scan.t_end) else {
            warn!("scan {}: no IMU coverage, skipped", scan.t_end);
            report.rejected_scans += 1;
            continue;
        };
        let (x_prior, cov_prior, buffer) = forward_propagate(&x, &cov, imu, t_state, scan.t_end, &cfg.sensor);
        let deskewed = match deskew(scan, &buffer, &extrinsic) {
            Ok(s) => s,
            Err(e) => {
                warn!("scan {}: {e}, skipped", scan.t_end);
                report.rejected_scans += 1;
                continue;
            }
        };
        let blind2 = cfg.sensor.blind_range * cfg.sensor.blind_range;
        let points: Vec<Vec3> = deskewed.points.iter().map(|p| p.xyz).filter(|p| p.norm_squared() >= blind2).collect();
        let frame = voxelizer.process(&points, scan.t_end);
        if let Some(d) = frame.diagnostics {
            report.control.push(d);
        }

        let (x_post, cov_post) = if bootstrapped {
            let u = iterated_update(&x_prior, &cov_prior, &frame.update.points, &map, cfg);
            if u.rejected {
                warn!("scan {}: update rejected, prior kept", scan.t_end);
            }
            report.estimator.push(EstimatorDiagnostics::from_update(scan.t_end, &u));
            (u.state, u.cov)
        } else {
            (x_prior, cov_prior)
        };
        if !frame.merge.is_empty() {
            integrate_scan(&frame.merge.points, &x_post, &mut map, cfg);
            bootstrapped = true;
        }
        if let Some(r) = cfg.map.crop_radius {
            map.crop(&x_post.position, r);
        }
        x = x_post;
        cov = cov_post;
        t_state = scan.t_end;
        report.trajectory.push(TrajectoryRecord::from_pose(scan.t_end, &x.pose()));
        report.timing.push(FrameTiming { t: scan.t_end, ms: clock.elapsed().as_secs_f64() * 1e3 });
    }
    Ok(report)
}

/// Index pairs `(est, gt)` associated by nearest timestamp within the tolerance.
pub fn associate(est: &[TrajectoryRecord], gt: &[TrajectoryRecord]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(est.len());
    for (i, e) in est.iter().enumerate() {
        let j = gt.partition_point(|g| g.t < e.t);
        let best = [j.checked_sub(1), (j < gt.len()).then_some(j)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (gt[a].t - e.t).abs().total_cmp(&(gt[b].t - e.t).abs()));
        if let Some(k) = best {
            if (gt[k].t - e.t).abs() <= ASSOCIATION_TOLERANCE {
                out.push((i, k));
            }
        }
    }
    out
}

/// Rigid `(R, t)` minimizing `Σ‖g − (R e + t)‖²`.
pub fn align_rigid(est: &[Vec3], gt: &[Vec3]) -> (Rotation, Vec3) {
    let n = est.len() as f64;
    let ce = est.iter().sum::<Vec3>() / n;
    let cg = gt.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (e, g) in est.iter().zip(gt) {
        h += (e - ce) * (g - cg).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut fix = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = Rotation::from_matrix_orthonormalized(vt.transpose() * fix * u.transpose());
    let t = cg - r.rotate(&ce);
    (r, t)
}

pub fn ate(est: &[TrajectoryRecord], gt: &[TrajectoryRecord]) -> Result<f64> {
    let pairs = associate(est, gt);
    if pairs.len() < 2 {
        return Err(Error::TooFewAssociations(pairs.len()));
    }
    let e: Vec<Vec3> = pairs.iter().map(|&(i, _)| est[i].position).collect();
    let g: Vec<Vec3> = pairs.iter().map(|&(_, j)| gt[j].position).collect();
    let (r, t) = align_rigid(&e, &g);
    let sq = e.iter().zip(&g).map(|(e, g)| (g - (r.rotate(e) + t)).norm_squared()).sum::<f64>();
    Ok((sq / e.len() as f64).sqrt())
}

/// RMSE of relative translation errors over segments whose ground-truth path length first
/// reaches `delta`. `NaN` when the trajectory is shorter than one segment.
pub fn rte(est: &[TrajectoryRecord], gt: &[TrajectoryRecord], delta: f64) -> Result<f64> {
    let pairs = associate(est, gt);
    if pairs.len() < 2 {
        return Err(Error::TooFewAssociations(pairs.len()));
    }
    let mut dist = vec![0.0];
    for w in pairs.windows(2) {
        let step = (gt[w[1].1].position - gt[w[0].1].position).norm();
        dist.push(dist.last().copied().unwrap_or(0.0) + step);
    }
    let (mut sq, mut n) = (0.0, 0usize);
    let mut j = 0;
    for i in 0..pairs.len() {
        j = j.max(i + 1);
        while j < pairs.len() && dist[j] - dist[i] < delta {
            j += 1;
        }
        if j >= pairs.len() {
            break;
        }
        let (ei, gi) = (est[pairs[i].0].pose(), gt[pairs[i].1].pose());
        let (ej, gj) = (est[pairs[j].0].pose(), gt[pairs[j].1].pose());
        let rel_e = ei.inverse() * ej;
        let rel_g = gi.inverse() * gj;
        sq += (rel_g.inverse() * rel_e).translation.norm_squared();
        n += 1;
    }
    Ok(if n == 0 { f64::NAN } else { (sq / n as f64).sqrt() })
}

/// `Σ |N_t − N_desired,t| · Δt_scan`.
pub fn iae(control: &[ControlDiagnostics], scan_period: f64) -> f64 {
    control.iter().map(|c| (c.n as f64 - c.n_desired as f64).abs() * scan_period).sum()
}

/// `max_t (N_t − N_desired,t) / N_desired,t`, floored at 0.
pub fn overshoot(control: &[ControlDiagnostics]) -> f64 {
    control
        .iter()
        .map(|c| (c.n as f64 - c.n_desired as f64) / c.n_desired as f64)
        .fold(0.0, f64::max)
}

pub fn format_timing_csv(rows: &[FrameTiming]) -> String {
    let mut out = String::from("t,ms\n");
    for r in rows {
        let _ = writeln!(out, "{},{}", r.t, r.ms);
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `trajectory.txt`, `control.csv`, `estimator.csv`, `timing.csv` and `summary.json`.
/// Only `timing.csv` and the timing fields of the summary depend on wall time.
pub fn write_outputs(report: &RunReport, summary: &Summary, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("trajectory.txt"), &format_trajectory(&report.trajectory))?;
    write(&dir.join("control.csv"), &format_control_csv(&report.control))?;
    write(&dir.join("estimator.csv"), &format_estimator_csv(&report.estimator))?;
    write(&dir.join("timing.csv"), &format_timing_csv(&report.timing))?;
    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    write(&dir.join("summary.json"), &(json + "\n"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControllerRow {
    pub strategy: String,
    pub iae: f64,
    pub overshoot: f64,
    pub ate: Option<f64>,
    pub mean_voxel_size: f64,
}

/// Runs each strategy on the same log; rows follow the order of `strategies`.
pub fn ablate_controllers(log: &SensorLog, cfg: &Config, strategies: &[ControllerStrategy]) -> Result<Vec<ControllerRow>> {
    strategies
        .par_iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.adavox.strategy = s;
            let report = run_pipeline(log, &c)?;
            let summary = report.summary(log.ground_truth.as_deref());
            Ok(ControllerRow {
                strategy: s.name().to_string(),
                iae: summary.iae,
                overshoot: summary.overshoot,
                ate: summary.ate_rmse,
                mean_voxel_size: mean(report.control.iter().map(|c| c.d)),
            })
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| x.to_string())
}

pub fn format_controller_table(rows: &[ControllerRow]) -> String {
    let mut out = String::from("strategy,IAE,overshoot,ATE,d_mean\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.strategy, r.iae, r.overshoot, opt(r.ate), r.mean_voxel_size);
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchRow {
    pub strategy: String,
    pub frame_ms_mean: f64,
    pub accessed_mean: f64,
    pub evaluated_mean: f64,
    pub ate: Option<f64>,
    #[serde(skip)]
    pub report: RunReport,
}

/// Runs the pipeline once per correspondence searcher. The discretization variance is
/// disabled so the searcher is the only difference between runs: its weight depends on
/// the searcher's own work counters.
pub fn ablate_search(log: &SensorLog, cfg: &Config) -> Result<Vec<SearchRow>> {
    SearchStrategy::ALL
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.map.search = s;
            c.estimator.discretization_variance = false;
            let report = run_pipeline(log, &c)?;
            let summary = report.summary(log.ground_truth.as_deref());
            Ok(SearchRow {
                strategy: s.name().to_string(),
                frame_ms_mean: summary.frame_ms_mean,
                accessed_mean: summary.accessed_mean,
                evaluated_mean: summary.evaluated_mean,
                ate: summary.ate_rmse,
                report,
            })
        })
        .collect()
}

pub fn format_search_table(rows: &[SearchRow]) -> String {
    let mut out = String::from("strategy,frame_ms_mean,Naccessed_mean,Neval_mean,ATE\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.strategy, r.frame_ms_mean, r.accessed_mean, r.evaluated_mean, opt(r.ate));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RigidTransform;
    use crate::synth::{generate, SynthOptions};

    fn line(n: usize) -> Vec<TrajectoryRecord> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.1;
                let pose = RigidTransform::new(Rotation::about_z(0.05 * i as f64), Vec3::new(i as f64, (0.3 * i as f64).sin(), 0.0));
                TrajectoryRecord::from_pose(t, &pose)
            })
            .collect()
    }

    #[test]
    fn ate_of_identical_and_shifted() {
        let gt = line(30);
        assert!(ate(&gt, &gt).unwrap() < 1e-12);
        let shifted: Vec<_> = gt.iter().map(|r| TrajectoryRecord { position: r.position + Vec3::x(), ..*r }).collect();
        assert!(ate(&shifted, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn ate_single_outlier_matches_brute_force() {
        let gt = line(40);
        let mut est = gt.clone();
        est[17].position.y += 0.3;
        let a = ate(&est, &gt).unwrap();
        // Alignment absorbs a little of the outlier; the unaligned value bounds it above.
        let unaligned = 0.3 / (40f64).sqrt();
        assert!(a <= unaligned + 1e-12 && a > 0.9 * unaligned, "{a} vs {unaligned}");
    }

    #[test]
    fn association_respects_tolerance() {
        let gt = line(5);
        let est: Vec<_> = gt.iter().map(|r| TrajectoryRecord { t: r.t + 0.02, ..*r }).collect();
        assert!(matches!(ate(&est, &gt), Err(Error::TooFewAssociations(0))));
        let est: Vec<_> = gt.iter().map(|r| TrajectoryRecord { t: r.t + 0.004, ..*r }).collect();
        assert_eq!(associate(&est, &gt).len(), 5);
    }

    #[test]
    fn rte_zero_on_identity_and_detects_drift() {
        let gt = line(40);
        assert_eq!(rte(&gt, &gt, 10.0).unwrap(), 0.0);
        let est: Vec<_> = gt.iter().map(|r| TrajectoryRecord { position: r.position * 1.01, ..*r }).collect();
        let e = rte(&est, &gt, 10.0).unwrap();
        assert!(e > 0.05 && e < 0.2, "{e}");
        assert!(rte(&gt, &gt, 1e3).unwrap().is_nan());
    }

    fn diag(n: usize, n_desired: u32) -> ControlDiagnostics {
        ControlDiagnostics { n, n_desired, ..ControlDiagnostics::default() }
    }

    #[test]
    fn tracking_indices() {
        let perfect = vec![diag(2000, 2000); 10];
        assert_eq!(iae(&perfect, 0.1), 0.0);
        assert_eq!(overshoot(&perfect), 0.0);
        let above = vec![diag(2100, 2000); 10];
        assert!((iae(&above, 0.1) - 100.0).abs() < 1e-9);
        assert!((overshoot(&above) - 0.05).abs() < 1e-12);
        assert_eq!(overshoot(&vec![diag(1500, 2000); 4]), 0.0);
    }

    #[test]
    fn empty_log_gives_empty_report() {
        let report = run_pipeline(&SensorLog::default(), &Config::default()).unwrap();
        assert!(report.trajectory.is_empty());
        let s = report.summary(None);
        assert_eq!(s.frames, 0);
        assert_eq!(s.iae, 0.0);
    }

    #[test]
    fn short_run_tracks_every_scan() {
        let log = generate("box_room", &SynthOptions { seed: 1, noise_free: true, duration: Some(3.0) }).unwrap();
        let cfg = crate::synth::scenario_config(true);
        let report = run_pipeline(&log, &cfg).unwrap();
        assert_eq!(report.trajectory.len(), log.scans.len());
        assert_eq!(report.estimator.len(), log.scans.len() - 1);
        let s = report.summary(log.ground_truth.as_deref());
        assert!(s.ate_rmse.unwrap() < 1e-2, "{:?}", s.ate_rmse);
    }
}
