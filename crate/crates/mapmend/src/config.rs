//! Run configuration: plain-text TOML with one section per subsystem.
//! Unknown keys are rejected; module-level invariants are re-validated at
//! parse time so a bad file fails before any work starts.

use mapmend_core::geometry::FieldCalibration;
use mapmend_core::infer::Thresholds;
use mapmend_core::model::GeneratorConfig;
use mapmend_core::noise::CorruptionSpec;
use mapmend_core::train::{LossWeights, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse: {0}")]
    Parse(String),
    #[error("config invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub corruption: CorruptionConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// "shapes" for the synthetic dataset, "dir" for an images/ + gt/ tree.
    pub kind: String,
    pub size: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub root: Option<PathBuf>,
    /// Tile-name lists for directory datasets; unlisted stems are unused.
    pub train_tiles: Vec<String>,
    pub val_tiles: Vec<String>,
    pub test_tiles: Vec<String>,
    /// Affine geotransform for GeoJSON inputs (x0, dx_col, dx_row, y0,
    /// dy_col, dy_row). Identity when absent.
    pub geotransform: Option<[f64; 6]>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: "shapes".into(),
            size: 128,
            train_count: 500,
            val_count: 50,
            root: None,
            train_tiles: Vec::new(),
            val_tiles: Vec::new(),
            test_tiles: Vec::new(),
            geotransform: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    pub max_disp: f64,
    pub max_rot_deg: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub p_remove: f64,
    pub p_inject: f64,
    pub global_max_disp: f64,
    pub global_max_rot_deg: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        CorruptionConfig {
            max_disp: 64.0,
            max_rot_deg: 30.0,
            scale_lo: 0.8,
            scale_hi: 1.25,
            p_remove: 0.1,
            p_inject: 0.1,
            global_max_disp: 16.0,
            global_max_rot_deg: 5.0,
        }
    }
}

impl CorruptionConfig {
    pub fn to_spec(&self, seed: u64) -> CorruptionSpec {
        CorruptionSpec {
            max_disp: self.max_disp,
            max_rot: self.max_rot_deg.to_radians(),
            scale_range: (self.scale_lo, self.scale_hi),
            p_remove: self.p_remove,
            p_inject: self.p_inject,
            global_max_disp: self.global_max_disp,
            global_max_rot: self.global_max_rot_deg.to_radians(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub recurrence_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { depth: 4, base_channels: 16, recurrence_steps: 2 }
    }
}

impl ModelConfig {
    pub fn to_generator_config(&self, parameter_seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            recurrence_steps: self.recurrence_steps,
            input_channels: 4,
            parameter_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub patch_size: usize,
    pub checkpoint_dir: PathBuf,
    pub w_mse: f64,
    pub w_mae: f64,
    pub w_missing: f64,
    pub w_obsolete: f64,
    pub stop_at_val_iou: Option<f64>,
    pub max_seconds: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 20,
            batch_size: 2,
            learning_rate: 1e-3,
            patch_size: 448,
            checkpoint_dir: PathBuf::from("runs"),
            w_mse: 1.0,
            w_mae: 1.0,
            w_missing: 1.0,
            w_obsolete: 1.0,
            stop_at_val_iou: None,
            max_seconds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub tau_obsolete: f64,
    pub tau_missing: f64,
    pub min_area: usize,
    pub simplify_tolerance: f64,
    pub patch_size: usize,
    pub border: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            tau_obsolete: 0.5,
            tau_missing: 0.5,
            min_area: 20,
            simplify_tolerance: 2.0,
            patch_size: 448,
            border: 64,
        }
    }
}

impl InferenceConfig {
    pub fn to_thresholds(&self) -> Thresholds {
        Thresholds {
            tau_obsolete: self.tau_obsolete,
            tau_missing: self.tau_missing,
            min_area: self.min_area,
            simplify_tolerance: self.simplify_tolerance,
            calibration: FieldCalibration::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// "alignment" or "align_and_detect".
    pub mode: String,
    pub displacements: Vec<f64>,
    pub trials: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: "align_and_detect".into(),
            displacements: vec![8.0, 16.0, 24.0, 32.0, 40.0, 48.0, 56.0, 64.0],
            trials: 1,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Re-check every module-level invariant with the config field names in
    /// the message.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.data.kind != "shapes" && self.data.kind != "dir" {
            return Err(ConfigError::Invalid(format!(
                "data.kind must be \"shapes\" or \"dir\", got {:?}",
                self.data.kind
            )));
        }
        if self.data.kind == "dir" && self.data.root.is_none() {
            return Err(ConfigError::Invalid("data.root is required when data.kind = \"dir\"".into()));
        }
        if self.data.kind == "shapes" {
            if self.data.size % 16 != 0 {
                return Err(ConfigError::Invalid(format!(
                    "data.size {} must be divisible by 16",
                    self.data.size
                )));
            }
            if self.data.train_count == 0 {
                return Err(ConfigError::Invalid("data.train_count must be >= 1".into()));
            }
        }
        self.corruption
            .to_spec(0)
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("corruption.{e}")))?;
        self.model
            .to_generator_config(0)
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("model: {e}")))?;
        self.to_train_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("training.{e}")))?;
        let inf = &self.inference;
        for (name, v) in [("tau_obsolete", inf.tau_obsolete), ("tau_missing", inf.tau_missing)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::Invalid(format!(
                    "inference.{name} {v} not in [0,1]"
                )));
            }
        }
        if inf.patch_size <= 2 * inf.border {
            return Err(ConfigError::Invalid(format!(
                "inference.patch_size {} must exceed twice inference.border {}",
                inf.patch_size, inf.border
            )));
        }
        if self.eval.mode != "alignment" && self.eval.mode != "align_and_detect" {
            return Err(ConfigError::Invalid(format!(
                "eval.mode must be \"alignment\" or \"align_and_detect\", got {:?}",
                self.eval.mode
            )));
        }
        if self.eval.displacements.is_empty() {
            return Err(ConfigError::Invalid("eval.displacements must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.training.epochs,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            patch_size: self.training.patch_size,
            corruption: self.corruption.to_spec(self.seed),
            weights: LossWeights {
                w_mse: self.training.w_mse,
                w_mae: self.training.w_mae,
                w_missing: self.training.w_missing,
                w_obsolete: self.training.w_obsolete,
            },
            model: self.model.to_generator_config(self.seed),
            seed: self.seed,
            checkpoint_dir: self.training.checkpoint_dir.clone(),
            stop_at_val_iou: self.training.stop_at_val_iou,
            max_seconds: self.training.max_seconds,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = toml::from_str::<RunConfig>("unknown_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("unknown_key"));
        let err =
            toml::from_str::<RunConfig>("[corruption]\nmax_displacement = 3\n").unwrap_err();
        assert!(err.to_string().contains("max_displacement"));
    }

    #[test]
    fn invalid_probability_names_the_field() {
        let config: RunConfig =
            toml::from_str("[corruption]\np_remove = 1.5\n").unwrap();
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("p_remove"), "{err}");
    }

    #[test]
    fn degrees_convert_to_radians() {
        let config: RunConfig = toml::from_str("[corruption]\nmax_rot_deg = 30.0\n").unwrap();
        let spec = config.corruption.to_spec(1);
        assert!((spec.max_rot - std::f64::consts::FRAC_PI_6).abs() < 1e-12);
    }
}
