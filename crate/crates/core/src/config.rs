//! Single JSON configuration covering every module, with validation that
//! names the offending field and its allowed range.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DragModel, PhysicsParams};
use crate::estimator::EstimatorParams;
use crate::frames::{CalibrationFile, CalibrationSet, DEFAULT_D_ORIG};
use crate::motionlib::{MotionError, MotionLibrary, QualityThresholds, SwingStyle};
use crate::planner::PlannerParams;
use crate::predictor::PredictorConfig;
use crate::simulator::{ScenarioConfig, SimError, SimSetup};

/// Environment variable consulted for the output directory when neither
/// the command line nor the config file sets one.
pub const OUT_DIR_ENV: &str = "RALLYKIT_OUT";
pub const DEFAULT_OUT_DIR: &str = "rallykit-out";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config value `{field}`: must be {bound}")]
    Invalid { field: String, bound: String },
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ConfigError {
    fn invalid((field, bound): (&str, &str)) -> Self {
        ConfigError::Invalid {
            field: field.to_string(),
            bound: bound.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FramesConfig {
    /// Origin offset behind the robot-side table edge.
    pub d_orig: f64,
    /// Explicit extrinsics; the nominal layout is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationFile>,
}

impl Default for FramesConfig {
    fn default() -> Self {
        Self {
            d_orig: DEFAULT_D_ORIG,
            calibration: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionLibConfig {
    /// Use a motion library during simulation.
    pub enabled: bool,
    /// Load clips from this directory instead of synthesizing a grid.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub library_dir: Option<PathBuf>,
    pub thresholds: QualityThresholds,
    pub style: SwingStyle,
    /// Synthetic grid resolution per axis.
    pub grid: [usize; 3],
    /// Grid corners of contact points relative to the body anchor.
    pub grid_min: Vector3<f64>,
    pub grid_max: Vector3<f64>,
}

impl Default for MotionLibConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            library_dir: None,
            thresholds: QualityThresholds::default(),
            style: SwingStyle::default(),
            grid: [4, 7, 5],
            grid_min: Vector3::new(0.1, -0.8, -0.65),
            grid_max: Vector3::new(0.6, 0.8, 0.35),
        }
    }
}

impl MotionLibConfig {
    pub fn validate(&self) -> Result<(), (&'static str, &'static str)> {
        self.thresholds.validate()?;
        if self.grid.iter().any(|&n| n == 0) {
            return Err(("motionlib.grid", ">= 1 per axis"));
        }
        if !(0..3).all(|i| self.grid_min[i] <= self.grid_max[i]) {
            return Err(("motionlib.grid_min", "<= grid_max per axis"));
        }
        if !(self.style.dt > 0.0) {
            return Err(("motionlib.style.dt", "> 0"));
        }
        Ok(())
    }

    /// Loads or synthesizes the library this section describes.
    pub fn build_library(&self, seed: u64) -> Result<MotionLibrary, MotionError> {
        match &self.library_dir {
            Some(dir) => MotionLibrary::load(dir, &self.thresholds),
            None => MotionLibrary::synthetic_grid(
                self.grid,
                self.grid_min,
                self.grid_max,
                &self.style,
                seed,
                &self.thresholds,
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub frames: FramesConfig,
    pub physics: PhysicsParams,
    pub estimator: EstimatorParams,
    pub predictor: PredictorConfig,
    pub planner: PlannerParams,
    pub motionlib: MotionLibConfig,
    pub scenario: ScenarioConfig,
}

impl GlobalConfig {
    /// Parses JSON text; blank input yields the defaults.
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg = Self::from_json_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.frames.d_orig >= 0.0 && self.frames.d_orig.is_finite()) {
            return Err(ConfigError::invalid(("frames.d_orig", ">= 0")));
        }
        self.physics.validate().map_err(ConfigError::invalid)?;
        self.estimator.validate().map_err(ConfigError::invalid)?;
        self.predictor.validate().map_err(ConfigError::invalid)?;
        self.planner.validate().map_err(ConfigError::invalid)?;
        self.motionlib.validate().map_err(ConfigError::invalid)?;
        self.scenario.validate().map_err(|e| match e {
            SimError::InvalidConfig { field, bound } => ConfigError::invalid((field, bound)),
            other => ConfigError::Invalid {
                field: "scenario".into(),
                bound: other.to_string(),
            },
        })?;
        self.calibration()?;
        Ok(())
    }

    /// Sets the flight model of the simulated world, the filter and the
    /// predictor together.
    pub fn set_drag_model(&mut self, model: DragModel) {
        self.scenario.world_model = model;
        self.estimator.model = model;
        self.predictor.model = model;
    }

    pub fn calibration(&self) -> Result<CalibrationSet, ConfigError> {
        match &self.frames.calibration {
            Some(file) => file
                .clone()
                .into_calibration()
                .map_err(|e| ConfigError::Calibration(e.to_string())),
            None => Ok(CalibrationSet::nominal(self.frames.d_orig, self.physics.half_length)),
        }
    }

    pub fn sim_setup(&self) -> Result<SimSetup, ConfigError> {
        Ok(SimSetup {
            seed: self.seed,
            physics: self.physics,
            calibration: self.calibration()?,
            estimator: self.estimator,
            predictor: self.predictor,
            planner: self.planner,
            scenario: self.scenario,
        })
    }

    /// Output directory: command line, then config file, then the
    /// environment, then the built-in default.
    pub fn resolve_out_dir(&self, flag: Option<&Path>, env: Option<&str>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blank_text_is_default() {
        assert_eq!(GlobalConfig::from_json_str("").unwrap(), GlobalConfig::default());
        assert_eq!(GlobalConfig::from_json_str(" \n\t").unwrap(), GlobalConfig::default());
        assert_eq!(GlobalConfig::from_json_str("{}").unwrap(), GlobalConfig::default());
    }

    #[test]
    fn defaults_validate() {
        GlobalConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_key_is_rejected_with_position() {
        let err = GlobalConfig::from_json_str("{\n  \"physics\": {\"c_vv\": 0.9}\n}").unwrap_err();
        match err {
            ConfigError::Parse { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("c_vv"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_names_field_and_bound() {
        let cfg = GlobalConfig::from_json_str(r#"{"physics": {"c_v": 1.5}}"#).unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("physics.c_v"), "{msg}");
        assert!(msg.contains("(0, 1]"), "{msg}");
    }

    #[test]
    fn dump_round_trips() {
        let mut cfg = GlobalConfig {
            seed: 99,
            out_dir: Some("runs/a".into()),
            ..Default::default()
        };
        cfg.physics.k_quadratic = 0.123_456_789_012_345;
        cfg.frames.calibration = Some(cfg.calibration().unwrap().to_file());
        let back = GlobalConfig::from_json_str(&cfg.to_json_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn drag_flag_sets_all_three_models() {
        let mut cfg = GlobalConfig::default();
        cfg.set_drag_model(DragModel::Linear);
        assert_eq!(cfg.scenario.world_model, DragModel::Linear);
        assert_eq!(cfg.estimator.model, DragModel::Linear);
        assert_eq!(cfg.predictor.model, DragModel::Linear);
    }

    #[test]
    fn out_dir_precedence() {
        let mut cfg = GlobalConfig::default();
        let flag = Path::new("flag");
        assert_eq!(cfg.resolve_out_dir(None, None), PathBuf::from(DEFAULT_OUT_DIR));
        assert_eq!(cfg.resolve_out_dir(None, Some("env")), PathBuf::from("env"));
        cfg.out_dir = Some("file".into());
        assert_eq!(cfg.resolve_out_dir(None, Some("env")), PathBuf::from("file"));
        assert_eq!(cfg.resolve_out_dir(Some(flag), Some("env")), PathBuf::from("flag"));
    }
}
