//! Experiment configuration: TOML file + dotted-path command-line overrides,
//! validated with field-level messages before any work starts.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use simclr_core::augment::AugmentationConfig;
use simclr_core::data::{DataSource, DatasetSpec};
use simclr_core::detector::{DetectorConfig, MinDelta};
use simclr_core::loss::LossConfig;
use thiserror::Error;

use crate::model::{Backbone, ModelSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override '{0}': expected key.path=value")]
    BadOverride(String),
    #[error("invalid config:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    pub loss: LossConfig,
    pub augmentation: AugmentationConfig,
    pub detector: DetectorConfig,
    /// N: positive pairs per batch (so 2N embeddings per loss evaluation).
    pub batch_pairs: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub run_seed: u64,
    /// Stop at detector onset of the validation positive term.
    pub early_stop: bool,
    /// Checkpoint interval in epochs; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
    /// Forces single-threaded kernels and zeroes wall-clock columns so two
    /// runs with the same seed produce byte-identical metrics files.
    pub deterministic: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        // Defaults mirror the CIFAR10 vehicle-subset experiment.
        Self {
            dataset: DatasetSpec {
                source: DataSource::Cifar10,
                included_classes: vec![
                    "airplane".into(),
                    "automobile".into(),
                    "ship".into(),
                    "truck".into(),
                ],
                train_fraction: 0.9,
                subset_size: None,
                root: None,
                normalization: None,
            },
            model: ModelSpec {
                backbone: Backbone::Resnet18Cifar,
                backbone_output_dim: 512,
                projection_hidden_dim: 512,
                projection_output_dim: 128,
            },
            loss: LossConfig { temperature: 0.5 },
            augmentation: AugmentationConfig::default(),
            detector: DetectorConfig::default(),
            batch_pairs: 256,
            learning_rate: 1e-3,
            max_epochs: 5000,
            run_seed: 0,
            early_stop: false,
            checkpoint_every: 100,
            output_dir: PathBuf::from("runs/latest"),
            deterministic: false,
        }
    }
}

impl ExperimentConfig {
    /// Field-level validation; collects every problem rather than stopping at
    /// the first.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if let Err(e) = self.dataset.validate() {
            problems.push(format!("dataset: {e}"));
        }
        if let Err(e) = self.model.validate() {
            problems.push(format!("model: {e}"));
        }
        if !(self.loss.temperature > 0.0) {
            problems.push(format!(
                "loss.temperature must be > 0, got {}",
                self.loss.temperature
            ));
        }
        if let Err(e) = self.augmentation.validate() {
            problems.push(format!("augmentation: {e}"));
        }
        if let Err(e) = self.detector.validate() {
            problems.push(format!("detector: {e}"));
        }
        if self.batch_pairs < 2 {
            problems.push(format!(
                "batch_pairs must be >= 2 for training (N = 1 gives identically zero loss), got {}",
                self.batch_pairs
            ));
        }
        if !(self.learning_rate > 0.0) {
            problems.push(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if self.max_epochs < 1 {
            problems.push("max_epochs must be >= 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value: toml::Value = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        value
            .try_into()
            .map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Applies one `key.path=value` override onto the parsed TOML tree. The value
/// side is parsed as TOML when possible and falls back to a plain string.
fn apply_override(root: &mut toml::Value, raw: &str) -> Result<(), ConfigError> {
    let (key, value_str) = raw
        .split_once('=')
        .ok_or_else(|| ConfigError::BadOverride(raw.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::BadOverride(raw.to_string()));
    }
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value_str}"))
        .map(|t| t["v"].clone())
        .unwrap_or_else(|_| toml::Value::String(value_str.trim().to_string()));

    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(raw.to_string()))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| ConfigError::BadOverride(raw.to_string()))?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Ready-to-run config for the synthetic-tiny CI pipeline.
pub fn tiny_config(output_dir: PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec {
            source: DataSource::SyntheticTiny,
            included_classes: vec!["blob".into(), "stripes".into()],
            // 0.875 of 128 per class leaves 16 validation examples per class;
            // the cap then trims the train side to 64: 64 train / 32 val.
            train_fraction: 0.875,
            subset_size: Some(64),
            root: None,
            normalization: None,
        },
        model: ModelSpec {
            backbone: Backbone::TinyMlp,
            backbone_output_dim: 64,
            projection_hidden_dim: 32,
            projection_output_dim: 16,
        },
        loss: LossConfig { temperature: 0.5 },
        augmentation: AugmentationConfig {
            crop_size: 8,
            ..AugmentationConfig::default()
        },
        detector: DetectorConfig {
            smoothing_window: 11,
            min_delta: MinDelta::FractionOfRange(0.01),
            patience: 25,
            warmup: 20,
        },
        batch_pairs: 8,
        learning_rate: 1e-3,
        max_epochs: 300,
        run_seed: 7,
        early_stop: false,
        checkpoint_every: 0,
        output_dir,
        deterministic: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text, &[]).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn overrides_beat_file_values() {
        let cfg = tiny_config(PathBuf::from("out"));
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(
            &text,
            &[
                "loss.temperature=0.1".into(),
                "batch_pairs=4".into(),
                "dataset.train_fraction=0.5".into(),
            ],
        )
        .unwrap();
        assert_eq!(back.loss.temperature, 0.1);
        assert_eq!(back.batch_pairs, 4);
        assert_eq!(back.dataset.train_fraction, 0.5);
    }

    #[test]
    fn unknown_override_key_is_rejected_at_parse() {
        let text = tiny_config(PathBuf::from("out")).to_toml_string();
        let err = ExperimentConfig::from_toml_str(&text, &["loss.temprature=0.1".into()]);
        assert!(err.is_err());
    }

    #[test]
    fn negative_temperature_names_the_field() {
        let text = tiny_config(PathBuf::from("out")).to_toml_string();
        let cfg = ExperimentConfig::from_toml_str(&text, &["loss.temperature=-1".into()]).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("loss.temperature"), "{err}");
    }

    #[test]
    fn tiny_config_validates() {
        tiny_config(PathBuf::from("out")).validate().unwrap();
    }

    #[test]
    fn batch_pairs_of_one_rejected() {
        let mut cfg = tiny_config(PathBuf::from("out"));
        cfg.batch_pairs = 1;
        assert!(cfg.validate().is_err());
    }
}
