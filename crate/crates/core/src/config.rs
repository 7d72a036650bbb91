//! The TOML run configuration shared by the command line tools.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{DetectorModel, DetectorQualityState, SaturatingRule};
use crate::pipeline::{BootstrapConfig, FilterConfig};
use crate::scene::SceneConfig;
use crate::skeleton::KEYPOINT_COUNT;
use crate::triangulation::RansacConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{0}: file not found")]
    MissingFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detections: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { calibration: None, detections: None, output_dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapSection {
    pub iterations: usize,
    /// Starting PCK of every keypoint.
    pub initial_pck: f64,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        Self { iterations: 3, initial_pck: 0.6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub bootstrap: BootstrapSection,
    pub scene: SceneConfig,
    pub ransac: RansacConfig,
    pub filters: FilterConfig,
    pub detector: DetectorModel,
    pub trainer: SaturatingRule,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        let filters = FilterConfig { n_best: 60, occluders: scene.occluders.clone(), ..Default::default() };
        Self {
            paths: PathsConfig::default(),
            bootstrap: BootstrapSection::default(),
            scene,
            ransac: RansacConfig::default(),
            filters,
            detector: DetectorModel::default(),
            trainer: SaturatingRule::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, path: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse { path: path.into(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.ransac.validate().map_err(|e| invalid(&e))?;
        self.filters.validate().map_err(|e| invalid(&e))?;
        self.detector.validate().map_err(|e| invalid(&e))?;
        if self.detector.pck.len() != KEYPOINT_COUNT {
            return Err(ConfigError::Invalid(format!("detector.pck needs {KEYPOINT_COUNT} entries")));
        }
        if self.bootstrap.iterations == 0 {
            return Err(ConfigError::Invalid("bootstrap.iterations must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bootstrap.initial_pck) {
            return Err(ConfigError::Invalid("bootstrap.initial_pck must lie in [0, 1]".into()));
        }
        if !(self.trainer.kappa > 0.0) {
            return Err(ConfigError::Invalid("trainer.kappa must be positive".into()));
        }
        if self.scene.ring.views < 2 {
            return Err(ConfigError::Invalid("scene.ring.views must be at least 2".into()));
        }
        for p in [&self.paths.calibration, &self.paths.detections].into_iter().flatten() {
            if !p.exists() {
                return Err(ConfigError::MissingFile(p.display().to_string()));
            }
        }
        Ok(())
    }

    pub fn bootstrap_config(&self) -> BootstrapConfig {
        BootstrapConfig {
            iterations: self.bootstrap.iterations,
            ransac: self.ransac,
            filters: self.filters.clone(),
            detector: self.detector.clone(),
        }
    }

    pub fn initial_state(&self) -> DetectorQualityState {
        DetectorQualityState::uniform(self.bootstrap.initial_pck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        let text = cfg.to_toml_string();
        assert_eq!(PipelineConfig::from_toml_str(&text, "x.toml").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = PipelineConfig::from_toml_str("[ransac]\nsigma = 3\n", "x.toml").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { .. }), "{err}");
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = PipelineConfig::from_toml_str("[bootstrap]\niterations = 1\n[ransac]\nmin_inliers = 4\n", "x.toml").unwrap();
        assert_eq!(cfg.bootstrap.iterations, 1);
        assert_eq!(cfg.ransac.min_inliers, 4);
        assert_eq!(cfg.filters.window_size, 15);
    }

    #[test]
    fn missing_input_file_is_reported() {
        let err = PipelineConfig::from_toml_str("[paths]\ncalibration = \"/nonexistent/cal.json\"\n", "x.toml").unwrap_err();
        assert!(matches!(err, ConfigError::MissingFile(_)));
    }
}
