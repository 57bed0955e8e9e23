//! Scale-aware adaptive voxelization.
//!
//! Each frame the scan is voxelized at the previous size, the median range feeds a
//! moving-average scale indicator, the indicator sets a desired point count, and a PD law
//! with scheduled gains moves the voxel size toward that count. Baseline control laws are
//! provided for ablations; all of them consume the same setpoint stream.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::io::{AdavoxConfig, ControllerStrategy};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VoxelizedScan {
    pub points: Vec<Vec3>,
    pub voxel_size: f64,
}

impl VoxelizedScan {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn voxel_index(p: &Vec3, d: f64) -> [i64; 3] {
    [(p.x / d).floor() as i64, (p.y / d).floor() as i64, (p.z / d).floor() as i64]
}

/// Keeps, per occupied voxel, the input point nearest the voxel center (lowest index on
/// ties). Output is ordered by representative input index.
pub fn voxel_downsample(points: &[Vec3], d: f64) -> VoxelizedScan {
    debug_assert!(d > 0.0);
    let mut best: HashMap<[i64; 3], (usize, f64)> = HashMap::with_capacity(points.len() / 2);
    for (i, p) in points.iter().enumerate() {
        let key = voxel_index(p, d);
        let center = Vec3::new(key[0] as f64 + 0.5, key[1] as f64 + 0.5, key[2] as f64 + 0.5) * d;
        let dist = (p - center).norm_squared();
        best.entry(key)
            .and_modify(|b| {
                if dist < b.1 {
                    *b = (i, dist);
                }
            })
            .or_insert((i, dist));
    }
    let mut keep: Vec<usize> = best.into_values().map(|b| b.0).collect();
    keep.sort_unstable();
    VoxelizedScan { points: keep.into_iter().map(|i| points[i]).collect(), voxel_size: d }
}

/// Downsamples at `d/2` for map insertion, then re-downsamples that result at `d` for the
/// state update. Returns `(merge, update)`.
pub fn bi_resolution(points: &[Vec3], d: f64) -> (VoxelizedScan, VoxelizedScan) {
    let merge = voxel_downsample(points, 0.5 * d);
    let update = voxel_downsample(&merge.points, d);
    (merge, update)
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { 0.5 * (values[n / 2 - 1] + values[n / 2]) })
}

/// Controller memory carried across frames.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelizerState {
    pub window: VecDeque<f64>,
    pub window_size: usize,
    /// `None` until the first nonempty frame; the first derivative term is then zero.
    pub prev_error: Option<f64>,
    pub d: f64,
    pub scan_period: f64,
}

impl VoxelizerState {
    pub fn new(cfg: &AdavoxConfig) -> Self {
        Self {
            window: VecDeque::with_capacity(cfg.window_size + 1),
            window_size: cfg.window_size,
            prev_error: None,
            d: cfg.d_init,
            scan_period: cfg.scan_period,
        }
    }
}

/// Returns `(m_t, m̄_t)` and pushes `m_t` into the window; `None` for an empty scan, in
/// which case the window is untouched.
pub fn scale_indicator(scan: &VoxelizedScan, state: &mut VoxelizerState) -> Option<(f64, f64)> {
    let mut ranges: Vec<f64> = scan.points.iter().map(|p| p.norm()).collect();
    let m = median(&mut ranges)?;
    state.window.push_back(m);
    while state.window.len() > state.window_size {
        state.window.pop_front();
    }
    let mbar = state.window.iter().sum::<f64>() / state.window.len() as f64;
    Some((m, mbar))
}

/// Saturating power map from scene scale to `[0, 1]`; flat at `τ_m` for `p > 1`.
pub fn scale_ratio(mbar: f64, cfg: &AdavoxConfig) -> f64 {
    if mbar >= cfg.scale_threshold {
        1.0
    } else {
        1.0 - (1.0 - mbar.max(0.0) / cfg.scale_threshold).powf(cfg.setpoint_exponent)
    }
}

/// Unrounded desired point count.
pub fn setpoint_continuous(mbar: f64, cfg: &AdavoxConfig) -> f64 {
    let (lo, hi) = (cfg.n_min as f64, cfg.n_max as f64);
    lo + (hi - lo) * scale_ratio(mbar, cfg)
}

pub fn setpoint(mbar: f64, cfg: &AdavoxConfig) -> u32 {
    setpoint_continuous(mbar, cfg).round() as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GainSchedule {
    pub phi: f64,
    pub psi_p: f64,
    pub psi_d: f64,
    pub gamma_p: f64,
    pub gamma_d: f64,
    pub kp: f64,
    pub kd: f64,
}

pub fn schedule_gains(mbar: f64, e: f64, de: f64, n_desired: u32, cfg: &AdavoxConfig) -> GainSchedule {
    let n = n_desired as f64;
    let phi = mbar.clamp(0.0, cfg.scale_threshold) / cfg.scale_threshold;
    let ep = cfg.lambda_p * n;
    let ed = cfg.lambda_d * n / cfg.scan_period;
    let psi_p = e.abs().min(ep) / ep;
    let psi_d = de.abs().min(ed) / ed;
    let gamma_p = (phi * psi_p).sqrt();
    let gamma_d = (phi * psi_d).sqrt();
    GainSchedule {
        phi,
        psi_p,
        psi_d,
        gamma_p,
        gamma_d,
        kp: cfg.kp_min + (cfg.kp_max - cfg.kp_min) * gamma_p,
        kd: cfg.kd_min + (cfg.kd_max - cfg.kd_min) * gamma_d,
    }
}

pub fn midpoint_gains(cfg: &AdavoxConfig) -> (f64, f64) {
    (0.5 * (cfg.kp_min + cfg.kp_max), 0.5 * (cfg.kd_min + cfg.kd_max))
}

/// Tracking error and its backward difference for this frame.
pub fn tracking_error(state: &VoxelizerState, n_temp: usize, n_desired: u32) -> (f64, f64) {
    let e = n_desired as f64 - n_temp as f64;
    let de = state.prev_error.map_or(0.0, |prev| (e - prev) / state.scan_period);
    (e, de)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlStep {
    pub d: f64,
    pub e: f64,
    pub de: f64,
    pub delta_d: f64,
}

/// PD voxel-size update: `Δd = −K_p·e − K_d·Δe`, clamped to `[d_min, d_max]`.
pub fn control_step(
    state: &mut VoxelizerState,
    n_temp: usize,
    n_desired: u32,
    kp: f64,
    kd: f64,
    cfg: &AdavoxConfig,
) -> ControlStep {
    let (e, de) = tracking_error(state, n_temp, n_desired);
    let delta_d = -kp * e - kd * de;
    let d = (state.d + delta_d).clamp(cfg.d_min, cfg.d_max);
    state.prev_error = Some(e);
    state.d = d;
    ControlStep { d, e, de, delta_d }
}

/// One row of the controller trace.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControlDiagnostics {
    pub t: f64,
    pub m: f64,
    pub mbar: f64,
    pub n_temp: usize,
    pub n_desired: u32,
    pub e: f64,
    pub de: f64,
    pub schedule: GainSchedule,
    pub delta_d: f64,
    pub d: f64,
    /// Size of the update scan voxelized at the new `d`.
    pub n: usize,
}

pub const CONTROL_CSV_HEADER: &str = "t,m,mbar,Ntemp,Ndes,e,de,phi,psip,psid,Kp,Kd,d,N";

pub fn format_control_csv(rows: &[ControlDiagnostics]) -> String {
    let mut out = String::with_capacity(64 + rows.len() * 128);
    out.push_str(CONTROL_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let s = &r.schedule;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t, r.m, r.mbar, r.n_temp, r.n_desired, r.e, r.de, s.phi, s.psi_p, s.psi_d, s.kp, s.kd, r.d, r.n
        );
    }
    out
}

pub fn write_control_csv(rows: &[ControlDiagnostics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_control_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Output of one voxelizer frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct VoxelizerFrame {
    pub merge: VoxelizedScan,
    pub update: VoxelizedScan,
    /// `None` for an empty scan: the controller is skipped.
    pub diagnostics: Option<ControlDiagnostics>,
}

/// Adaptive voxelizer driving one of the configured control strategies.
#[derive(Debug, Clone)]
pub struct Voxelizer {
    pub cfg: AdavoxConfig,
    pub state: VoxelizerState,
}

impl Voxelizer {
    pub fn new(cfg: &AdavoxConfig) -> Self {
        Self { cfg: cfg.clone(), state: VoxelizerState::new(cfg) }
    }

    pub fn voxel_size(&self) -> f64 {
        self.state.d
    }

    pub fn process(&mut self, points: &[Vec3], t: f64) -> VoxelizerFrame {
        let cfg = &self.cfg;
        let temp = voxel_downsample(points, self.state.d);
        let Some((m, mbar)) = scale_indicator(&temp, &mut self.state) else {
            let (merge, update) = bi_resolution(points, self.state.d);
            return VoxelizerFrame { merge, update, diagnostics: None };
        };
        let n_desired = setpoint(mbar, cfg);
        let mut n_temp = temp.len();
        let (e, de) = tracking_error(&self.state, n_temp, n_desired);
        let mut schedule = schedule_gains(mbar, e, de, n_desired, cfg);
        let d_prev = self.state.d;
        let clamp = |d: f64| d.clamp(cfg.d_min, cfg.d_max);

        let d = match cfg.strategy {
            ControllerStrategy::PdScheduled => {
                control_step(&mut self.state, n_temp, n_desired, schedule.kp, schedule.kd, cfg).d
            }
            ControllerStrategy::PdFixedGains => {
                let (kp, kd) = midpoint_gains(cfg);
                schedule.kp = kp;
                schedule.kd = kd;
                control_step(&mut self.state, n_temp, n_desired, kp, kd, cfg).d
            }
            ControllerStrategy::Fixed => cfg.d_init,
            ControllerStrategy::LinearScaling => clamp(d_prev * n_temp as f64 / n_desired as f64),
            ControllerStrategy::ThresholdSwitch => {
                n_temp = voxel_downsample(points, cfg.coarse_voxel_size).len();
                if n_temp < cfg.switch_count as usize {
                    cfg.fine_voxel_size
                } else {
                    cfg.coarse_voxel_size
                }
            }
            ControllerStrategy::VolumeScaling => {
                let d_ref = cfg.volume_reference_size;
                n_temp = voxel_downsample(points, d_ref).len();
                clamp(d_ref * (n_temp as f64 / n_desired as f64).cbrt())
            }
        };
        if !matches!(cfg.strategy, ControllerStrategy::PdScheduled | ControllerStrategy::PdFixedGains) {
            self.state.prev_error = Some(e);
            self.state.d = d;
        }
        let (merge, update) = bi_resolution(points, d);
        let diagnostics = ControlDiagnostics {
            t,
            m,
            mbar,
            n_temp,
            n_desired,
            e,
            de,
            schedule,
            delta_d: d - d_prev,
            d,
            n: update.len(),
        };
        VoxelizerFrame { merge, update, diagnostics: Some(diagnostics) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> AdavoxConfig {
        AdavoxConfig::default()
    }

    #[test]
    fn nearest_center_survives() {
        let pts = [Vec3::new(0.05, 0.05, 0.05), Vec3::new(0.25, 0.25, 0.25)];
        let v = voxel_downsample(&pts, 0.5);
        assert_eq!(v.points, vec![pts[1]]);
    }

    #[test]
    fn distinct_voxels_and_floor() {
        let pts = [Vec3::new(0.1, 0.1, 0.1), Vec3::new(0.6, 0.1, 0.1)];
        assert_eq!(voxel_downsample(&pts, 0.5).len(), 2);
        assert_eq!(voxel_index(&Vec3::new(-0.1, 0.0, 0.0), 0.5), [-1, 0, 0]);
        assert!(voxel_downsample(&[], 0.5).is_empty());
    }

    #[test]
    fn tie_keeps_lowest_index() {
        let pts = [Vec3::new(0.75, 0.5, 0.5), Vec3::new(0.25, 0.5, 0.5)];
        assert_eq!(voxel_downsample(&pts, 1.0).points, vec![pts[0]]);
    }

    #[test]
    fn scale_indicator_examples() {
        let mut s = VoxelizerState::new(&cfg());
        let scan = VoxelizedScan { points: vec![Vec3::new(5.0, 0.0, 0.0); 3], voxel_size: 0.5 };
        assert_eq!(scale_indicator(&scan, &mut s), Some((5.0, 5.0)));

        let mut s = VoxelizerState::new(&cfg());
        for r in [10.0, 20.0, 30.0] {
            let scan = VoxelizedScan { points: vec![Vec3::new(0.0, r, 0.0)], voxel_size: 0.5 };
            scale_indicator(&scan, &mut s);
        }
        assert_eq!(s.window.iter().sum::<f64>() / 3.0, 20.0);

        let mut s = VoxelizerState::new(&cfg());
        let scan = VoxelizedScan {
            points: vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 2.0), Vec3::new(100.0, 0.0, 0.0)],
            voxel_size: 0.5,
        };
        assert_eq!(scale_indicator(&scan, &mut s).unwrap().0, 2.0);
        assert_eq!(scale_indicator(&VoxelizedScan::default(), &mut s), None);
        assert_eq!(s.window.len(), 1);
    }

    #[test]
    fn window_evicts_oldest() {
        let mut s = VoxelizerState::new(&cfg());
        for r in 1..=7 {
            let scan = VoxelizedScan { points: vec![Vec3::new(r as f64, 0.0, 0.0)], voxel_size: 0.5 };
            scale_indicator(&scan, &mut s);
        }
        assert_eq!(s.window, VecDeque::from(vec![3.0, 4.0, 5.0, 6.0, 7.0]));
    }

    #[test]
    fn setpoint_examples() {
        let c = cfg();
        assert_eq!(setpoint(0.0, &c), 1000);
        assert_eq!(setpoint(30.0, &c), 4000);
        assert_eq!(setpoint(15.0, &c), 3250);
        assert_eq!(setpoint(300.0, &c), 4000);
    }

    #[test]
    fn gain_examples() {
        let c = cfg();
        let g = schedule_gains(30.0, 1000.0, 0.0, 2000, &c);
        assert_eq!(g.kp, c.kp_max);
        let g = schedule_gains(0.0, 1000.0, 1e6, 2000, &c);
        assert_eq!((g.gamma_p, g.gamma_d, g.kp, g.kd), (0.0, 0.0, c.kp_min, c.kd_min));
        let g = schedule_gains(15.0, 100.0, 0.0, 2000, &c);
        assert!((g.gamma_p - 0.5).abs() < 1e-15);
        assert!((g.kp - 5.05e-5).abs() < 1e-18);
    }

    #[test]
    fn control_examples() {
        let c = cfg();
        let mut s = VoxelizerState::new(&c);
        s.prev_error = Some(0.0);
        let step = control_step(&mut s, 1000, 1500, 1e-5, 0.0, &c);
        assert!(step.delta_d < 0.0 && step.d < 0.5);

        let mut s = VoxelizerState::new(&c);
        s.prev_error = Some(0.0);
        assert_eq!(control_step(&mut s, 2000, 2000, 1e-4, 1e-7, &c).d, 0.5);

        let mut s = VoxelizerState { d: 0.03, ..VoxelizerState::new(&c) };
        s.prev_error = Some(2000.0);
        // Δd = −1e-5·2000 − 0 = −0.02
        assert_eq!(control_step(&mut s, 0, 2000, 1e-5, 0.0, &c).d, 0.02);
    }

    #[test]
    fn bi_resolution_examples() {
        let p = [Vec3::new(0.3, -0.2, 1.0)];
        let (m, v) = bi_resolution(&p, 0.5);
        assert_eq!((m.points.clone(), v.points.clone()), (p.to_vec(), p.to_vec()));
        let (m, v) = bi_resolution(&[], 0.5);
        assert!(m.is_empty() && v.is_empty());

        let mut grid = Vec::new();
        for i in 0..100 {
            for j in 0..100 {
                for k in 0..100 {
                    grid.push(Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * 0.01);
                }
            }
        }
        let (m, v) = bi_resolution(&grid, 0.5);
        assert_eq!((m.len(), v.len()), (64, 8));
    }

    #[test]
    fn baseline_laws() {
        let mut c = cfg();
        let ring: Vec<Vec3> = (0..2000).map(|i| {
            let a = i as f64 * std::f64::consts::TAU / 2000.0;
            Vec3::new(10.0 * a.cos(), 10.0 * a.sin(), 0.0)
        }).collect();

        c.strategy = ControllerStrategy::LinearScaling;
        let mut vx = Voxelizer::new(&c);
        let f = vx.process(&ring, 0.0).diagnostics.unwrap();
        let expected = (0.5 * f.n_temp as f64 / f.n_desired as f64).clamp(c.d_min, c.d_max);
        assert_eq!(f.d, expected);

        c.strategy = ControllerStrategy::VolumeScaling;
        let n = voxel_downsample(&ring, c.volume_reference_size).len();
        let mut vx = Voxelizer::new(&c);
        let f = vx.process(&ring, 0.0).diagnostics.unwrap();
        assert_eq!(f.n_temp, n);
        assert!((f.d - (0.5 * (n as f64 / f.n_desired as f64).cbrt()).clamp(c.d_min, c.d_max)).abs() < 1e-15);

        c.strategy = ControllerStrategy::ThresholdSwitch;
        let mut vx = Voxelizer::new(&c);
        let f = vx.process(&ring, 0.0).diagnostics.unwrap();
        let coarse = voxel_downsample(&ring, c.coarse_voxel_size).len();
        assert_eq!(f.d, if coarse < 1000 { c.fine_voxel_size } else { c.coarse_voxel_size });

        c.strategy = ControllerStrategy::Fixed;
        let mut vx = Voxelizer::new(&c);
        for k in 0..3 {
            assert_eq!(vx.process(&ring, k as f64).diagnostics.unwrap().d, c.d_init);
        }
    }

    #[test]
    fn volume_scaling_doubles_at_eight_times_count() {
        let d_ref: f64 = 0.5;
        assert_eq!(d_ref * 8f64.cbrt(), 1.0);
    }

    #[test]
    fn empty_scan_skips_controller() {
        let mut vx = Voxelizer::new(&cfg());
        let before = vx.state.clone();
        let f = vx.process(&[], 0.0);
        assert!(f.diagnostics.is_none() && f.merge.is_empty());
        assert_eq!(vx.state, before);
    }

    #[test]
    fn control_csv_has_header_and_rows() {
        let text = format_control_csv(&[ControlDiagnostics::default(); 2]);
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().next().unwrap(), CONTROL_CSV_HEADER);
    }

    proptest! {
        #[test]
        fn setpoint_monotone(a in 0.0f64..60.0, b in 0.0f64..60.0) {
            let c = cfg();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(setpoint_continuous(lo, &c) <= setpoint_continuous(hi, &c));
        }

        #[test]
        fn gains_and_size_stay_in_bounds(mbar in 0.0f64..100.0, n_temp in 0usize..20000, n_des in 1000u32..4000,
                                         prev in -5000.0f64..5000.0, d0 in 0.02f64..1.0) {
            let c = cfg();
            let mut s = VoxelizerState { d: d0, prev_error: Some(prev), ..VoxelizerState::new(&c) };
            let (e, de) = tracking_error(&s, n_temp, n_des);
            let g = schedule_gains(mbar, e, de, n_des, &c);
            for v in [g.phi, g.psi_p, g.psi_d, g.gamma_p, g.gamma_d] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(g.kp >= c.kp_min && g.kp <= c.kp_max);
            prop_assert!(g.kd >= c.kd_min && g.kd <= c.kd_max);
            let step = control_step(&mut s, n_temp, n_des, g.kp, g.kd, &c);
            prop_assert!(step.d >= c.d_min && step.d <= c.d_max);
        }

        #[test]
        fn sign_property_without_derivative(n_temp in 0usize..8000, n_des in 1000u32..4000, d0 in 0.02f64..1.0) {
            let c = cfg();
            let mut s = VoxelizerState { d: d0, prev_error: Some(0.0), ..VoxelizerState::new(&c) };
            let step = control_step(&mut s, n_temp, n_des, 1e-5, 0.0, &c);
            if step.e > 0.0 { prop_assert!(step.d <= d0); }
            if step.e < 0.0 { prop_assert!(step.d >= d0); }
        }

        #[test]
        fn downsample_deterministic_and_coarser_never_adds(
            pts in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 0..300),
            d in 0.05f64..2.0,
        ) {
            let pts: Vec<Vec3> = pts.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect();
            let a = voxel_downsample(&pts, d);
            let b = voxel_downsample(&pts, d);
            prop_assert_eq!(&a, &b);
            let (m, v) = bi_resolution(&pts, d);
            prop_assert!(v.len() <= m.len() && m.len() <= pts.len());
            for (i, p) in a.points.iter().enumerate() {
                for q in &a.points[i + 1..] {
                    prop_assert_ne!(voxel_index(p, d), voxel_index(q, d));
                }
            }
        }
    }
}
