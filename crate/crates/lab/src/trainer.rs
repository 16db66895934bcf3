//! Epoch orchestration: optimization on train batches, fixed-protocol
//! evaluation on validation batches, decomposition telemetry, checkpointing
//! and detector-driven early stopping.
//!
//! Validation protocol: batch composition and augmentation seeds are fixed
//! across epochs (validation views use epoch 0 in the seed derivation), so
//! the validation curves are comparable epoch to epoch. The validation split
//! is truncated to a multiple of 2N at setup time; incomplete train batches
//! are dropped so N stays constant.

use std::path::PathBuf;
use std::time::Instant;

use candle_core::{Device, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use simclr_core::augment::view_seed;
use simclr_core::data::{
    assemble_pair_batch, compute_normalization, load_dataset, split, DataError, ImageCollection,
    Normalization, PairBatch, SplitIndices,
};
use simclr_core::detector::{
    compare_onsets, detect_onset, DetectorError, OnsetOrdering, OnsetReport,
};
use simclr_core::telemetry::{EpochMetrics, MetricsWriter, Split, TelemetryError};

use crate::config::ExperimentConfig;
use crate::model::{Model, ModelError};
use crate::tensor_loss::{decompose_loss_tensor, TensorLossError};

/// Salt mixed into the per-epoch shuffle seed so it never collides with a
/// per-sample augmentation seed.
const SHUFFLE_SALT: u64 = 0x5b1f_f1e5_ca55_a17e;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] TensorLossError),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss at epoch {epoch}; diagnostic snapshot written")]
    NonFiniteLoss {
        epoch: usize,
        batch_sources: Vec<usize>,
        last_metrics: Option<EpochMetrics>,
    },
}

/// Summary of a completed (or cleanly stopped) run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub dataset_stats: DatasetStats,
    pub normalization: Normalization,
    pub stop_reason: String,
    pub final_epoch: usize,
    pub metrics_path: PathBuf,
    pub checkpoint_paths: Vec<PathBuf>,
    pub onset_positive_term: Option<OnsetReport>,
    pub onset_total_loss: Option<OnsetReport>,
    pub onset_verdict: Option<OnsetOrdering>,
    pub split_warning: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total_examples: usize,
    pub train_examples: usize,
    pub val_examples: usize,
}

/// Test seams for the run loop.
#[derive(Default)]
pub struct TrainHooks {
    /// Replaces the monitored validation positive-term value per epoch;
    /// used to drive the detector with a synthetic series in tests.
    pub monitor_override: Option<Box<dyn Fn(i64) -> f64>>,
}

pub struct TrainerState {
    config: ExperimentConfig,
    model: Model,
    optimizer: AdamW,
    collection: ImageCollection,
    splits: SplitIndices,
    normalization: Normalization,
    device: Device,
    last_metrics: Option<EpochMetrics>,
}

impl TrainerState {
    pub fn new(config: ExperimentConfig) -> Result<Self, TrainError> {
        let device = Device::Cpu;
        let collection = load_dataset(&config.dataset)?;
        let mut splits = split(
            &collection,
            config.dataset.train_fraction,
            config.run_seed,
            config.dataset.subset_size,
        )?;
        // Fixed validation batches need a multiple of N pairs.
        let keep = splits.val.len() - splits.val.len() % config.batch_pairs;
        splits.val.truncate(keep);

        let normalization = match config.dataset.normalization {
            Some(n) => n,
            None => compute_normalization(&collection, &splits.train),
        };
        let model = Model::new(&config.model, &device)?;
        model.reseed(config.run_seed)?;
        let optimizer = AdamW::new(
            model.trainable_vars(),
            ParamsAdamW {
                lr: config.learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        Ok(Self {
            config,
            model,
            optimizer,
            collection,
            splits,
            normalization,
            device,
            last_metrics: None,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn splits(&self) -> &SplitIndices {
        &self.splits
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    /// Loads model parameters from a checkpoint written by a previous run.
    pub fn load_checkpoint(
        &mut self,
        path: &std::path::Path,
    ) -> Result<crate::model::CheckpointSidecar, TrainError> {
        Ok(self.model.load_checkpoint(path)?)
    }

    /// Overrides the optimizer learning rate; used by tests exercising the
    /// null-step contract.
    pub fn set_learning_rate(&mut self, lr: f64) {
        self.optimizer.set_learning_rate(lr);
    }

    pub fn parameter_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let data = self.model.varmap().data().lock().unwrap();
        let mut names: Vec<&String> = data.keys().collect();
        names.sort();
        for name in names {
            let values = data[name]
                .flatten_all()
                .unwrap()
                .to_dtype(candle_core::DType::F32)
                .unwrap()
                .to_vec1::<f32>()
                .unwrap();
            for v in values {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        out
    }

    fn batch_tensor(&self, batch: &PairBatch) -> Result<Tensor, TrainError> {
        let rows = batch.images.len();
        let (c, h, w) = (
            batch.images[0].channels(),
            batch.images[0].height(),
            batch.images[0].width(),
        );
        let mut flat = Vec::with_capacity(rows * c * h * w);
        for img in &batch.images {
            flat.extend_from_slice(img.data());
        }
        Ok(Tensor::from_vec(flat, (rows, c, h, w), &self.device)?)
    }

    fn forward_decomposition(
        &self,
        batch: &PairBatch,
        train: bool,
    ) -> Result<crate::tensor_loss::TensorLossDecomposition, TrainError> {
        let images = self.batch_tensor(batch)?;
        let h = self.model.encode(&images, train)?;
        let z = self.model.project(&h)?;
        Ok(decompose_loss_tensor(&z, self.config.loss.temperature)?)
    }

    /// One optimization pass over the shuffled train split. Returns
    /// example-weighted epoch averages; the decomposition identity
    /// total = positive + negative holds exactly per row.
    pub fn train_epoch(&mut self, epoch: usize) -> Result<EpochMetrics, TrainError> {
        let start = Instant::now();
        let n = self.config.batch_pairs;
        let mut order = self.splits.train.clone();
        let shuffle_seed = view_seed(self.config.run_seed, epoch as u64, SHUFFLE_SALT);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));

        let mut pos_sum = 0.0;
        let mut neg_sum = 0.0;
        let mut examples = 0usize;
        // chunks_exact drops the incomplete final batch, keeping N constant.
        for chunk in order.chunks_exact(n) {
            let batch = assemble_pair_batch(
                &self.collection,
                chunk,
                epoch as u64,
                &self.config.augmentation,
                self.config.run_seed,
                &self.normalization,
            )?;
            let decomp = self.forward_decomposition(&batch, true)?;
            let (total, pos, neg) = decomp.to_scalars()?;
            if !total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch_sources: batch.source_indices.clone(),
                    last_metrics: self.last_metrics,
                });
            }
            self.optimizer.backward_step(&decomp.total)?;
            pos_sum += pos * chunk.len() as f64;
            neg_sum += neg * chunk.len() as f64;
            examples += chunk.len();
        }
        if examples == 0 {
            return Err(TrainError::Config(format!(
                "train split ({} examples) smaller than one batch of N = {n} pairs",
                self.splits.train.len()
            )));
        }
        let positive_term = pos_sum / examples as f64;
        let negative_term = neg_sum / examples as f64;
        let metrics = EpochMetrics {
            epoch: epoch as i64,
            split: Split::Train,
            total_loss: positive_term + negative_term,
            positive_term,
            negative_term,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        self.last_metrics = Some(metrics);
        Ok(metrics)
    }

    /// Fixed-protocol validation pass: fixed batch composition, fixed
    /// augmentation seeds, no parameter updates.
    pub fn evaluate(&mut self, epoch: usize) -> Result<EpochMetrics, TrainError> {
        let start = Instant::now();
        let n = self.config.batch_pairs;
        if self.splits.val.len() < n {
            return Err(TrainError::Config(format!(
                "validation split ({} examples) smaller than one batch of N = {n} pairs",
                self.splits.val.len()
            )));
        }
        let mut pos_sum = 0.0;
        let mut neg_sum = 0.0;
        let mut examples = 0usize;
        for chunk in self.splits.val.chunks_exact(n) {
            // Epoch 0 in the seed derivation keeps validation views constant.
            let batch = assemble_pair_batch(
                &self.collection,
                chunk,
                0,
                &self.config.augmentation,
                self.config.run_seed,
                &self.normalization,
            )?;
            let decomp = self.forward_decomposition(&batch, false)?;
            let (_, pos, neg) = decomp.to_scalars()?;
            pos_sum += pos * chunk.len() as f64;
            neg_sum += neg * chunk.len() as f64;
            examples += chunk.len();
        }
        let positive_term = pos_sum / examples as f64;
        let negative_term = neg_sum / examples as f64;
        Ok(EpochMetrics {
            epoch: epoch as i64,
            split: Split::Val,
            total_loss: positive_term + negative_term,
            positive_term,
            negative_term,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }
}

fn io_err(path: &std::path::Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Full experiment: alternates train/evaluate, persists telemetry, feeds the
/// detector, checkpoints, and stops at max_epochs or detected onset.
pub fn run(config: ExperimentConfig) -> Result<RunManifest, TrainError> {
    run_with_hooks(config, TrainHooks::default())
}

pub fn run_with_hooks(config: ExperimentConfig, hooks: TrainHooks) -> Result<RunManifest, TrainError> {
    config
        .validate()
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let output_dir = config.output_dir.clone();
    std::fs::create_dir_all(&output_dir).map_err(io_err(&output_dir))?;
    let metrics_path = output_dir.join("metrics.csv");
    // Creating the metrics file up front surfaces unwritable output dirs
    // before any training happens.
    let mut writer = MetricsWriter::create(&metrics_path)?;

    let deterministic = config.deterministic;
    let run_id = format!("seed{}-{}", config.run_seed, config_digest(&config));
    let mut state = TrainerState::new(config)?;
    let config = state.config().clone();

    let ckpt_dir = output_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;

    let mut checkpoint_paths = Vec::new();
    let mut pos_series: Vec<(i64, f64)> = Vec::new();
    let mut total_series: Vec<(i64, f64)> = Vec::new();
    let mut stop_reason = "max_epochs".to_string();
    let mut final_epoch = 0usize;
    let has_val = !state.splits.val.is_empty();
    if let Some(w) = &state.splits.warning {
        eprintln!("warning: {w}");
    }

    let zero_wall = |mut m: EpochMetrics| {
        if deterministic {
            m.wall_time_s = 0.0;
        }
        m
    };

    for epoch in 1..=config.max_epochs {
        final_epoch = epoch;
        let train_row = match state.train_epoch(epoch) {
            Ok(row) => zero_wall(row),
            Err(err) => {
                write_abort_snapshot(&output_dir, &err);
                return Err(err);
            }
        };
        writer.append(&train_row)?;

        if has_val {
            let val_row = zero_wall(state.evaluate(epoch)?);
            writer.append(&val_row)?;
            let monitored = match &hooks.monitor_override {
                Some(f) => f(epoch as i64),
                None => val_row.positive_term,
            };
            pos_series.push((epoch as i64, monitored));
            total_series.push((epoch as i64, val_row.total_loss));

            if config.early_stop {
                let report = detect_onset(&pos_series, &config.detector, "val/positive_term")?;
                if report.fired() {
                    stop_reason = "positive_term_onset".to_string();
                    let path = ckpt_dir.join(format!("epoch_{epoch}.safetensors"));
                    state.model.save_checkpoint(&path, epoch, &run_id)?;
                    checkpoint_paths.push(path);
                    break;
                }
            }
        }

        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            let path = ckpt_dir.join(format!("epoch_{epoch}.safetensors"));
            state.model.save_checkpoint(&path, epoch, &run_id)?;
            checkpoint_paths.push(path);
        }
    }

    let onset_positive_term = if pos_series.is_empty() {
        None
    } else {
        Some(detect_onset(&pos_series, &config.detector, "val/positive_term")?)
    };
    let onset_total_loss = if total_series.is_empty() {
        None
    } else {
        Some(detect_onset(&total_series, &config.detector, "val/total_loss")?)
    };
    let onset_verdict = match (&onset_positive_term, &onset_total_loss) {
        (Some(p), Some(t)) => Some(compare_onsets(p, t)),
        _ => None,
    };

    let manifest = RunManifest {
        run_id,
        dataset_stats: DatasetStats {
            total_examples: state.collection.len(),
            train_examples: state.splits.train.len(),
            val_examples: state.splits.val.len(),
        },
        normalization: state.normalization,
        stop_reason,
        final_epoch,
        metrics_path,
        checkpoint_paths,
        onset_positive_term,
        onset_total_loss,
        onset_verdict,
        split_warning: state.splits.warning.clone(),
        config,
    };
    let manifest_path = output_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

fn write_abort_snapshot(output_dir: &std::path::Path, err: &TrainError) {
    if let TrainError::NonFiniteLoss {
        epoch,
        batch_sources,
        last_metrics,
    } = err
    {
        let snapshot = serde_json::json!({
            "reason": "non_finite_loss",
            "epoch": epoch,
            "batch_sources": batch_sources,
            "last_metrics": last_metrics,
        });
        let _ = std::fs::write(
            output_dir.join("abort_snapshot.json"),
            serde_json::to_string_pretty(&snapshot).unwrap(),
        );
    }
}

/// Short stable digest of the effective config, used in run ids.
fn config_digest(config: &ExperimentConfig) -> String {
    use std::hash::{Hash, Hasher};
    let mut hasher = std::collections::hash_map::DefaultHasher::new();
    config.to_toml_string().hash(&mut hasher);
    format!("{:08x}", hasher.finish() as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::tiny_config;

    fn quick_config(dir: &std::path::Path) -> ExperimentConfig {
        let mut cfg = tiny_config(dir.to_path_buf());
        cfg.max_epochs = 2;
        cfg.dataset.subset_size = Some(16);
        cfg.batch_pairs = 4;
        cfg
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bitwise_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = TrainerState::new(quick_config(dir.path())).unwrap();
        state.set_learning_rate(0.0);
        let before = state.parameter_bytes();
        state.train_epoch(1).unwrap();
        let after = state.parameter_bytes();
        assert_eq!(before, after);
    }

    #[test]
    fn train_metrics_satisfy_decomposition_identity() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = TrainerState::new(quick_config(dir.path())).unwrap();
        let row = state.train_epoch(1).unwrap();
        assert!((row.total_loss - (row.positive_term + row.negative_term)).abs() < 1e-5);
    }

    #[test]
    fn train_total_loss_decreases_over_first_five_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = TrainerState::new(tiny_config(dir.path().to_path_buf())).unwrap();
        let mut totals = Vec::new();
        for epoch in 1..=5 {
            totals.push(state.train_epoch(epoch).unwrap().total_loss);
        }
        for pair in totals.windows(2) {
            assert!(pair[1] < pair[0], "not decreasing: {totals:?}");
        }
    }

    #[test]
    fn evaluate_is_deterministic_at_fixed_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = TrainerState::new(quick_config(dir.path())).unwrap();
        let a = state.evaluate(3).unwrap();
        let b = state.evaluate(3).unwrap();
        assert_eq!(a.total_loss.to_bits(), b.total_loss.to_bits());
        assert_eq!(a.positive_term.to_bits(), b.positive_term.to_bits());
        // Frozen parameters: identical metrics at every epoch.
        let c = state.evaluate(9).unwrap();
        assert_eq!(a.total_loss.to_bits(), c.total_loss.to_bits());
    }

    #[test]
    fn evaluate_bounds_on_random_init() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_config(dir.path());
        cfg.batch_pairs = 4; // 2N = 8
        let mut state = TrainerState::new(cfg).unwrap();
        let row = state.evaluate(1).unwrap();
        assert!(row.total_loss.is_finite());
        assert!(row.total_loss >= 0.0);
        // total <= log(2N - 1) + (positive-term bound 1/tau = 2).
        let bound = (8.0f64 - 1.0).ln() + 2.0 + 2.0;
        assert!(row.total_loss <= bound, "loss {}", row.total_loss);
    }

    #[test]
    fn run_single_epoch_writes_two_rows_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_config(dir.path());
        cfg.max_epochs = 1;
        let manifest = run(cfg).unwrap();
        assert_eq!(manifest.stop_reason, "max_epochs");
        assert_eq!(manifest.final_epoch, 1);
        let rows = simclr_core::telemetry::read_rows(&manifest.metrics_path).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn injected_series_triggers_early_stop_at_onset_plus_patience() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_config(dir.path());
        cfg.max_epochs = 30;
        cfg.early_stop = true;
        cfg.detector = simclr_core::detector::DetectorConfig {
            smoothing_window: 1,
            min_delta: simclr_core::detector::MinDelta::Absolute(0.05),
            patience: 4,
            warmup: 0,
        };
        // V-shaped series with minimum at epoch 3.
        let hooks = TrainHooks {
            monitor_override: Some(Box::new(|e| (e - 3).abs() as f64)),
        };
        let manifest = run_with_hooks(cfg, hooks).unwrap();
        assert_eq!(manifest.stop_reason, "positive_term_onset");
        assert_eq!(manifest.final_epoch, 3 + 4);
        let onset = manifest.onset_positive_term.unwrap();
        assert_eq!(onset.onset_epoch, Some(3));
        assert_eq!(onset.fired_epoch, Some(7));
    }

    #[test]
    fn epochs_are_contiguous_and_rows_paired() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_config(dir.path());
        cfg.max_epochs = 3;
        let manifest = run(cfg).unwrap();
        for split in [Split::Train, Split::Val] {
            let series = simclr_core::telemetry::read_series(
                &manifest.metrics_path,
                split,
                simclr_core::telemetry::MetricColumn::TotalLoss,
            )
            .unwrap();
            let epochs: Vec<i64> = series.iter().map(|&(e, _)| e).collect();
            assert_eq!(epochs, vec![1, 2, 3]);
        }
    }

    #[test]
    fn unwritable_output_dir_fails_before_training() {
        let cfg = {
            let mut c = quick_config(std::path::Path::new("/proc/definitely/not/writable"));
            c.max_epochs = 1;
            c
        };
        assert!(matches!(run(cfg), Err(TrainError::Io { .. })));
    }

    #[test]
    fn validation_smaller_than_batch_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick_config(dir.path());
        cfg.batch_pairs = 64; // val split cannot fill one batch
        let mut state = TrainerState::new(cfg).unwrap();
        assert!(matches!(state.evaluate(1), Err(TrainError::Config(_))));
    }
}
