use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidTransform, Rotation, Vec3};

/// Voxel-size control law used by the adaptive voxelizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerStrategy {
    Fixed,
    LinearScaling,
    ThresholdSwitch,
    VolumeScaling,
    PdFixedGains,
    PdScheduled,
}

impl ControllerStrategy {
    pub const ALL: [ControllerStrategy; 6] = [
        ControllerStrategy::Fixed,
        ControllerStrategy::LinearScaling,
        ControllerStrategy::ThresholdSwitch,
        ControllerStrategy::VolumeScaling,
        ControllerStrategy::PdFixedGains,
        ControllerStrategy::PdScheduled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerStrategy::Fixed => "fixed",
            ControllerStrategy::LinearScaling => "linear_scaling",
            ControllerStrategy::ThresholdSwitch => "threshold_switch",
            ControllerStrategy::VolumeScaling => "volume_scaling",
            ControllerStrategy::PdFixedGains => "pd_fixed_gains",
            ControllerStrategy::PdScheduled => "pd_scheduled",
        }
    }
}

impl std::str::FromStr for ControllerStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

/// Neighbor-voxel policy for point-to-point correspondence search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStrategy {
    /// Region-selected candidates with distance pruning.
    Pruned,
    /// Root plus all 26 neighbors.
    All26,
    /// Root plus the 6 face neighbors.
    Face6,
}

impl SearchStrategy {
    pub const ALL: [SearchStrategy; 3] = [SearchStrategy::All26, SearchStrategy::Face6, SearchStrategy::Pruned];

    pub fn name(self) -> &'static str {
        match self {
            SearchStrategy::Pruned => "pruned",
            SearchStrategy::All26 => "all26",
            SearchStrategy::Face6 => "face6",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdavoxConfig {
    pub window_size: usize,
    pub n_min: u32,
    pub n_max: u32,
    pub setpoint_exponent: f64,
    /// Scene-scale threshold τ_m (m) at which the setpoint saturates.
    pub scale_threshold: f64,
    pub lambda_p: f64,
    pub lambda_d: f64,
    pub d_min: f64,
    pub d_max: f64,
    pub kp_min: f64,
    pub kp_max: f64,
    pub kd_min: f64,
    pub kd_max: f64,
    /// Initial voxel size d₀ (m); also the constant size of the `fixed` strategy.
    pub d_init: f64,
    pub scan_period: f64,
    pub strategy: ControllerStrategy,
    pub coarse_voxel_size: f64,
    pub fine_voxel_size: f64,
    pub switch_count: u32,
    pub volume_reference_size: f64,
}

impl Default for AdavoxConfig {
    fn default() -> Self {
        Self {
            window_size: 5,
            n_min: 1000,
            n_max: 4000,
            setpoint_exponent: 2.0,
            scale_threshold: 30.0,
            lambda_p: 0.1,
            lambda_d: 0.2,
            d_min: 0.02,
            d_max: 1.0,
            kp_min: 1e-6,
            kp_max: 1e-4,
            kd_min: 1e-9,
            kd_max: 1e-7,
            d_init: 0.5,
            scan_period: 0.1,
            strategy: ControllerStrategy::PdScheduled,
            coarse_voxel_size: 0.25,
            fine_voxel_size: 0.05,
            switch_count: 1000,
            volume_reference_size: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    pub root_voxel_size: f64,
    pub max_points_per_voxel: usize,
    /// Largest admissible smallest-eigenvalue (m²) of a planar voxel.
    pub plane_threshold: f64,
    /// Outlier rejection distance τ_closest; `None` means `root_voxel_size / 3`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub closest_threshold: Option<f64>,
    pub search: SearchStrategy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop_radius: Option<f64>,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            root_voxel_size: 0.5,
            max_points_per_voxel: 50,
            plane_threshold: 0.01,
            closest_threshold: None,
            search: SearchStrategy::Pruned,
            crop_radius: None,
        }
    }
}

impl MapConfig {
    pub fn closest_threshold(&self) -> f64 {
        self.closest_threshold.unwrap_or(self.root_voxel_size / 3.0)
    }

    /// Whether pruned search is guaranteed to match an exhaustive neighbor scan.
    pub fn search_is_exact(&self) -> bool {
        self.closest_threshold() <= self.root_voxel_size / 3.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Use point-to-point fallback terms; `false` is the plane-only baseline.
    pub hybrid: bool,
    pub lambda_po: f64,
    pub discretization_variance: bool,
    pub converge_threshold: f64,
    pub max_iterations: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            hybrid: true,
            lambda_po: 0.1,
            discretization_variance: true,
            converge_threshold: 1e-3,
            max_iterations: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorConfig {
    pub range_std: f64,
    pub bearing_std: f64,
    /// Points closer than this (m) are dropped before voxelization.
    pub blind_range: f64,
    /// Continuous-time noise densities of the IMU.
    pub gyro_noise: f64,
    pub accel_noise: f64,
    pub gyro_bias_walk: f64,
    pub accel_bias_walk: f64,
    /// LiDAR → IMU extrinsic as a rotation vector (rad) and translation (m).
    pub extrinsic_rotation: [f64; 3],
    pub extrinsic_translation: [f64; 3],
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            range_std: 0.02,
            bearing_std: 0.0015,
            blind_range: 0.3,
            gyro_noise: 2e-3,
            accel_noise: 2e-2,
            gyro_bias_walk: 1e-5,
            accel_bias_walk: 1e-4,
            extrinsic_rotation: [0.0; 3],
            extrinsic_translation: [0.0; 3],
        }
    }
}

impl SensorConfig {
    pub fn extrinsic(&self) -> RigidTransform {
        RigidTransform::new(
            Rotation::exp(&Vec3::from(self.extrinsic_rotation)),
            Vec3::from(self.extrinsic_translation),
        )
    }
}

/// Prior standard deviations of the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub position_std: f64,
    pub rotation_std: f64,
    pub velocity_std: f64,
    pub gyro_bias_std: f64,
    pub accel_bias_std: f64,
    pub gravity_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            position_std: 1e-3,
            rotation_std: 1e-3,
            velocity_std: 1e-2,
            gyro_bias_std: 1e-3,
            accel_bias_std: 5e-2,
            gravity_std: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub adavox: AdavoxConfig,
    pub map: MapConfig,
    pub estimator: EstimatorConfig,
    pub sensor: SensorConfig,
    pub init: InitConfig,
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config { key: key.into(), message: format!("must be positive and finite, got {v}") })
    }
}

fn non_negative(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config { key: key.into(), message: format!("must be non-negative, got {v}") })
    }
}

fn interval(key: &str, lo: f64, hi: f64) -> Result<()> {
    if lo <= hi {
        Ok(())
    } else {
        Err(Error::Config { key: key.into(), message: format!("empty interval [{lo}, {hi}]") })
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adavox;
        if a.window_size == 0 {
            return Err(Error::Config { key: "adavox.window_size".into(), message: "must be at least 1".into() });
        }
        positive("adavox.n_min", a.n_min as f64)?;
        positive("adavox.n_max", a.n_max as f64)?;
        interval("adavox.n_min", a.n_min as f64, a.n_max as f64)?;
        if !(a.setpoint_exponent > 1.0 && a.setpoint_exponent.is_finite()) {
            return Err(Error::Config {
                key: "adavox.setpoint_exponent".into(),
                message: format!("must exceed 1, got {}", a.setpoint_exponent),
            });
        }
        positive("adavox.scale_threshold", a.scale_threshold)?;
        for (key, v) in [("adavox.lambda_p", a.lambda_p), ("adavox.lambda_d", a.lambda_d)] {
            positive(key, v)?;
            if v > 1.0 {
                return Err(Error::Config { key: key.into(), message: format!("must lie in (0, 1], got {v}") });
            }
        }
        positive("adavox.d_min", a.d_min)?;
        positive("adavox.d_max", a.d_max)?;
        interval("adavox.d_min", a.d_min, a.d_max)?;
        positive("adavox.kp_min", a.kp_min)?;
        positive("adavox.kp_max", a.kp_max)?;
        interval("adavox.kp_min", a.kp_min, a.kp_max)?;
        positive("adavox.kd_min", a.kd_min)?;
        positive("adavox.kd_max", a.kd_max)?;
        interval("adavox.kd_min", a.kd_min, a.kd_max)?;
        positive("adavox.d_init", a.d_init)?;
        if a.d_init < a.d_min || a.d_init > a.d_max {
            return Err(Error::Config {
                key: "adavox.d_init".into(),
                message: format!("must lie in [{}, {}], got {}", a.d_min, a.d_max, a.d_init),
            });
        }
        positive("adavox.scan_period", a.scan_period)?;
        positive("adavox.coarse_voxel_size", a.coarse_voxel_size)?;
        positive("adavox.fine_voxel_size", a.fine_voxel_size)?;
        positive("adavox.volume_reference_size", a.volume_reference_size)?;

        let m = &self.map;
        positive("map.root_voxel_size", m.root_voxel_size)?;
        if m.max_points_per_voxel == 0 {
            return Err(Error::Config { key: "map.max_points_per_voxel".into(), message: "must be at least 1".into() });
        }
        positive("map.plane_threshold", m.plane_threshold)?;
        if let Some(t) = m.closest_threshold {
            positive("map.closest_threshold", t)?;
        }
        if let Some(r) = m.crop_radius {
            positive("map.crop_radius", r)?;
        }

        let e = &self.estimator;
        positive("estimator.lambda_po", e.lambda_po)?;
        positive("estimator.converge_threshold", e.converge_threshold)?;
        if e.max_iterations == 0 {
            return Err(Error::Config { key: "estimator.max_iterations".into(), message: "must be at least 1".into() });
        }

        let s = &self.sensor;
        positive("sensor.range_std", s.range_std)?;
        positive("sensor.bearing_std", s.bearing_std)?;
        non_negative("sensor.blind_range", s.blind_range)?;
        positive("sensor.gyro_noise", s.gyro_noise)?;
        positive("sensor.accel_noise", s.accel_noise)?;
        non_negative("sensor.gyro_bias_walk", s.gyro_bias_walk)?;
        non_negative("sensor.accel_bias_walk", s.accel_bias_walk)?;
        for (i, v) in s.extrinsic_rotation.iter().chain(s.extrinsic_translation.iter()).enumerate() {
            if !v.is_finite() {
                let key = if i < 3 { "sensor.extrinsic_rotation" } else { "sensor.extrinsic_translation" };
                return Err(Error::Config { key: key.into(), message: "must be finite".into() });
            }
        }

        let i = &self.init;
        positive("init.position_std", i.position_std)?;
        positive("init.rotation_std", i.rotation_std)?;
        positive("init.velocity_std", i.velocity_std)?;
        positive("init.gyro_bias_std", i.gyro_bias_std)?;
        positive("init.accel_bias_std", i.accel_bias_std)?;
        positive("init.gravity_std", i.gravity_std)?;
        Ok(())
    }
}

/// Parses TOML text; unspecified keys keep their defaults.
pub fn parse_config(text: &str, origin: &Path) -> Result<Config> {
    let cfg: Config = toml::from_str(text).map_err(|e| {
        let (line, column) = e
            .span()
            .map(|span| {
                let before = &text[..span.start.min(text.len())];
                let line = before.matches('\n').count() + 1;
                let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
                (line, column)
            })
            .unwrap_or((0, 0));
        Error::Parse { file: origin.to_path_buf(), line, column, message: e.message().to_string() }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Config> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

pub fn write_config(cfg: &Config, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = toml::to_string(cfg).map_err(|e| Error::Config { key: "<root>".into(), message: e.to_string() })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<Config> {
        parse_config(text, Path::new("test.toml"))
    }

    #[test]
    fn empty_file_gives_published_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c, Config::default());
        let a = &c.adavox;
        assert_eq!(a.window_size, 5);
        assert_eq!((a.n_min, a.n_max), (1000, 4000));
        assert_eq!(a.setpoint_exponent, 2.0);
        assert_eq!(a.scale_threshold, 30.0);
        assert_eq!((a.lambda_p, a.lambda_d), (0.1, 0.2));
        assert_eq!((a.d_min, a.d_max), (0.02, 1.0));
        assert_eq!((a.kp_min, a.kp_max), (1e-6, 1e-4));
        assert_eq!((a.kd_min, a.kd_max), (1e-9, 1e-7));
        assert_eq!(c.map.root_voxel_size, 0.5);
        assert_eq!(c.estimator.lambda_po, 0.1);
        assert_eq!(c.map.closest_threshold(), 0.5 / 3.0);
        assert_eq!(c.estimator.converge_threshold, 1e-3);
        assert_eq!(c.estimator.max_iterations, 5);
        assert_eq!(c.map.max_points_per_voxel, 50);
    }

    #[test]
    fn inverted_voxel_bounds_are_rejected() {
        let err = parse("[adavox]\nd_min = 2.0\nd_max = 1.0\nd_init = 1.0\n").unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "adavox.d_min"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn single_override_changes_one_field() {
        let c = parse("[adavox]\nscale_threshold = 10.0\n").unwrap();
        let mut expected = Config::default();
        expected.adavox.scale_threshold = 10.0;
        assert_eq!(c, expected);
    }

    #[test]
    fn unknown_key_reports_location() {
        let err = parse("[adavox]\nbogus = 1\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert!(line >= 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn strategy_names_parse() {
        for k in ControllerStrategy::ALL {
            assert_eq!(k.name().parse::<ControllerStrategy>().unwrap(), k);
        }
        assert!("pid".parse::<ControllerStrategy>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn write_then_load_is_identity(
            tau in 1.0f64..100.0, lp in 0.01f64..1.0, d0 in 0.02f64..1.0, kp in 1e-7f64..1e-5,
            tc in proptest::option::of(0.01f64..0.5), hybrid in any::<bool>(), iters in 1usize..10,
            ext in proptest::array::uniform3(-1.0f64..1.0),
        ) {
            let mut c = Config::default();
            c.adavox.scale_threshold = tau;
            c.adavox.lambda_p = lp;
            c.adavox.d_init = d0;
            c.adavox.kp_min = kp;
            c.map.closest_threshold = tc;
            c.estimator.hybrid = hybrid;
            c.estimator.max_iterations = iters;
            c.sensor.extrinsic_translation = ext;
            c.adavox.strategy = ControllerStrategy::VolumeScaling;
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.toml");
            write_config(&c, &path).unwrap();
            prop_assert_eq!(load_config(&path).unwrap(), c);
        }
    }
}
