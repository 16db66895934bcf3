//! Dataset ingestion, class filtering, stratified splitting and pair-batch
//! assembly.
//!
//! Two sources are supported: the standard CIFAR10 binary layout on disk, and
//! `synthetic-tiny`, a procedurally generated micro-dataset (8x8 colored
//! geometric blobs, 2 classes) that exercises the full pipeline with zero
//! downloads.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{make_views, AugmentError, AugmentationConfig};
use crate::image::ImageTensor;

/// Environment variable naming the dataset root directory.
pub const DATA_ROOT_ENV: &str = "SIMCLR_DATA_ROOT";

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

pub const SYNTHETIC_TINY_CLASSES: [&str; 2] = ["blob", "stripes"];

/// Examples generated per class for the synthetic-tiny source.
pub const SYNTHETIC_TINY_PER_CLASS: usize = 128;

const SYNTHETIC_TINY_SEED: u64 = 0x51_7c_1a_b5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt dataset file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("unknown class name '{0}'")]
    UnknownClass(String),
    #[error("included_classes must be nonempty")]
    NoClasses,
    #[error("train_fraction must lie in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("split would be empty: {0}")]
    EmptySplit(String),
    #[error("dataset root not set: pass dataset.root in the config or set SIMCLR_DATA_ROOT")]
    MissingRoot,
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Cifar10,
    SyntheticTiny,
}

/// Per-channel normalization applied after augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub included_classes: Vec<String>,
    pub train_fraction: f64,
    /// Optional cap on per-split example count, applied after splitting.
    pub subset_size: Option<usize>,
    /// Dataset root directory; falls back to the environment variable.
    pub root: Option<PathBuf>,
    /// When absent, statistics are computed over the training split.
    pub normalization: Option<Normalization>,
}

impl DatasetSpec {
    pub fn class_names(source: DataSource) -> &'static [&'static str] {
        match source {
            DataSource::Cifar10 => &CIFAR10_CLASSES,
            DataSource::SyntheticTiny => &SYNTHETIC_TINY_CLASSES,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.included_classes.is_empty() {
            return Err(DataError::NoClasses);
        }
        let known = Self::class_names(self.source);
        for name in &self.included_classes {
            if !known.contains(&name.to_lowercase().as_str()) {
                return Err(DataError::UnknownClass(name.clone()));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(DataError::BadFraction(self.train_fraction));
        }
        Ok(())
    }
}

/// An indexed, class-filtered image collection.
#[derive(Debug, Clone)]
pub struct ImageCollection {
    pub images: Vec<ImageTensor>,
    pub labels: Vec<u8>,
    /// Original dataset index of each example.
    pub source_indices: Vec<usize>,
    pub class_names: Vec<String>,
}

impl ImageCollection {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Index lists into an [`ImageCollection`], one per split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Set when the configuration produced a degenerate but legal split.
    pub warning: Option<String>,
}

/// 2N augmented views with positive pairs on consecutive rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub images: Vec<ImageTensor>,
    pub source_indices: Vec<usize>,
}

impl PairBatch {
    pub fn num_pairs(&self) -> usize {
        self.source_indices.len()
    }
}

fn resolve_root(spec: &DatasetSpec) -> Result<PathBuf, DataError> {
    if let Some(root) = &spec.root {
        return Ok(root.clone());
    }
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .ok_or(DataError::MissingRoot)
}

fn read_cifar_file(path: &Path, images: &mut Vec<ImageTensor>, labels: &mut Vec<u8>) -> Result<(), DataError> {
    const RECORD: usize = 3073;
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if bytes.is_empty() || bytes.len() % RECORD != 0 {
        return Err(DataError::Corrupt {
            path: path.to_path_buf(),
            reason: format!("length {} is not a multiple of {RECORD}", bytes.len()),
        });
    }
    for record in bytes.chunks_exact(RECORD) {
        let label = record[0];
        if label > 9 {
            return Err(DataError::Corrupt {
                path: path.to_path_buf(),
                reason: format!("label byte {label} out of range"),
            });
        }
        let pixels: Vec<f32> = record[1..].iter().map(|&b| b as f32 / 255.0).collect();
        images.push(
            ImageTensor::new(3, 32, 32, pixels).expect("CIFAR record has fixed shape"),
        );
        labels.push(label);
    }
    Ok(())
}

fn load_cifar10(root: &Path) -> Result<(Vec<ImageTensor>, Vec<u8>), DataError> {
    // Accept either the root itself or the conventional extracted subdirectory.
    let candidates = [root.to_path_buf(), root.join("cifar-10-batches-bin")];
    let dir = candidates
        .iter()
        .find(|d| d.join("data_batch_1.bin").exists())
        .ok_or_else(|| DataError::Io {
            path: root.join("data_batch_1.bin"),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "CIFAR10 batch files not found"),
        })?;
    let mut images = Vec::with_capacity(50_000);
    let mut labels = Vec::with_capacity(50_000);
    for i in 1..=5 {
        read_cifar_file(&dir.join(format!("data_batch_{i}.bin")), &mut images, &mut labels)?;
    }
    Ok((images, labels))
}

/// Procedurally generates one synthetic-tiny example: class 0 is a colored
/// blob on a dark background, class 1 is colored diagonal stripes.
fn synthetic_tiny_image(class: u8, index: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(
        SYNTHETIC_TINY_SEED ^ ((class as u64) << 32) ^ index as u64,
    );
    let size = 8usize;
    let color: [f32; 3] = [
        rng.gen_range(0.4..1.0),
        rng.gen_range(0.4..1.0),
        rng.gen_range(0.4..1.0),
    ];
    let background: f32 = rng.gen_range(0.0..0.15);
    let mut img = ImageTensor::new(3, size, size, vec![background; 3 * size * size]).unwrap();
    match class {
        0 => {
            let cy = rng.gen_range(2.0..6.0);
            let cx = rng.gen_range(2.0..6.0);
            let r2: f32 = rng.gen_range(1.5..7.0);
            for y in 0..size {
                for x in 0..size {
                    let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                    if d2 <= r2 {
                        for c in 0..3 {
                            img.set(c, y, x, color[c]);
                        }
                    }
                }
            }
        }
        _ => {
            let period = rng.gen_range(2..4usize);
            let phase = rng.gen_range(0..period);
            for y in 0..size {
                for x in 0..size {
                    if (y + x + phase) % period == 0 {
                        for c in 0..3 {
                            img.set(c, y, x, color[c]);
                        }
                    }
                }
            }
        }
    }
    // Low-amplitude noise keeps every example unique.
    for v in img.data_mut() {
        *v = (*v + rng.gen_range(-0.02..0.02f32)).clamp(0.0, 1.0);
    }
    img
}

fn load_synthetic_tiny() -> (Vec<ImageTensor>, Vec<u8>) {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    // Interleave classes so original-index ordering stays balanced.
    for index in 0..SYNTHETIC_TINY_PER_CLASS {
        for class in 0..SYNTHETIC_TINY_CLASSES.len() as u8 {
            images.push(synthetic_tiny_image(class, index));
            labels.push(class);
        }
    }
    (images, labels)
}

/// Loads the source and keeps only examples whose label is in
/// `included_classes`, ordered by original dataset index.
pub fn load_dataset(spec: &DatasetSpec) -> Result<ImageCollection, DataError> {
    spec.validate()?;
    let (images, labels) = match spec.source {
        DataSource::Cifar10 => load_cifar10(&resolve_root(spec)?)?,
        DataSource::SyntheticTiny => load_synthetic_tiny(),
    };
    let known = DatasetSpec::class_names(spec.source);
    let included: Vec<u8> = spec
        .included_classes
        .iter()
        .map(|name| {
            known
                .iter()
                .position(|k| *k == name.to_lowercase())
                .map(|i| i as u8)
                .ok_or_else(|| DataError::UnknownClass(name.clone()))
        })
        .collect::<Result<_, _>>()?;

    let mut out = ImageCollection {
        images: Vec::new(),
        labels: Vec::new(),
        source_indices: Vec::new(),
        class_names: known.iter().map(|s| s.to_string()).collect(),
    };
    for (idx, (img, &label)) in images.into_iter().zip(&labels).enumerate() {
        if included.contains(&label) {
            out.images.push(img);
            out.labels.push(label);
            out.source_indices.push(idx);
        }
    }
    Ok(out)
}

/// Deterministic, class-stratified split into disjoint, exhaustive train and
/// validation index lists. `subset_cap` truncates each split after splitting.
pub fn split(
    collection: &ImageCollection,
    train_fraction: f64,
    seed: u64,
    subset_cap: Option<usize>,
) -> Result<SplitIndices, DataError> {
    if collection.is_empty() {
        return Err(DataError::EmptySplit("collection is empty".into()));
    }
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(DataError::BadFraction(train_fraction));
    }

    let mut by_class: HashMap<u8, Vec<usize>> = HashMap::new();
    for (i, &label) in collection.labels.iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }
    let mut classes: Vec<u8> = by_class.keys().copied().collect();
    classes.sort_unstable();

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in classes {
        let mut indices = by_class.remove(&class).unwrap();
        indices.shuffle(&mut rng);
        let n_train = (train_fraction * indices.len() as f64).round() as usize;
        let n_train = n_train.min(indices.len());
        val.extend_from_slice(&indices[n_train..]);
        train.extend_from_slice(&indices[..n_train]);
    }
    train.sort_unstable();
    val.sort_unstable();

    if let Some(cap) = subset_cap {
        truncate_stratified(&mut train, &collection.labels, cap);
        truncate_stratified(&mut val, &collection.labels, cap);
    }

    if train.is_empty() {
        return Err(DataError::EmptySplit(format!(
            "train_fraction {train_fraction} leaves no training examples"
        )));
    }
    let warning = if val.is_empty() {
        Some("validation split is empty; onset detection and early stopping are disabled".into())
    } else {
        None
    };
    Ok(SplitIndices { train, val, warning })
}

/// Keeps at most `cap` indices, taking examples class-round-robin so the
/// truncated split stays balanced.
fn truncate_stratified(indices: &mut Vec<usize>, labels: &[u8], cap: usize) {
    if indices.len() <= cap {
        return;
    }
    let mut by_class: HashMap<u8, Vec<usize>> = HashMap::new();
    for &i in indices.iter() {
        by_class.entry(labels[i]).or_default().push(i);
    }
    let mut classes: Vec<u8> = by_class.keys().copied().collect();
    classes.sort_unstable();
    let mut kept = Vec::with_capacity(cap);
    let mut cursor = 0usize;
    while kept.len() < cap {
        let mut advanced = false;
        for &class in &classes {
            let bucket = &by_class[&class];
            if cursor < bucket.len() && kept.len() < cap {
                kept.push(bucket[cursor]);
                advanced = true;
            }
        }
        if !advanced {
            break;
        }
        cursor += 1;
    }
    kept.sort_unstable();
    *indices = kept;
}

fn normalize(image: &mut ImageTensor, norm: &Normalization) {
    let (h, w) = (image.height(), image.width());
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = (image.get(c, y, x) - norm.mean[c]) / norm.std[c];
                image.set(c, y, x, v);
            }
        }
    }
}

/// Per-channel mean/std over a set of collection indices (before
/// augmentation); used when the config does not pin normalization constants.
pub fn compute_normalization(collection: &ImageCollection, indices: &[usize]) -> Normalization {
    let mut sum = [0.0f64; 3];
    let mut sum_sq = [0.0f64; 3];
    let mut count = 0usize;
    for &i in indices {
        let img = &collection.images[i];
        let plane = img.height() * img.width();
        for c in 0..3 {
            for v in &img.data()[c * plane..(c + 1) * plane] {
                sum[c] += *v as f64;
                sum_sq[c] += (*v as f64) * (*v as f64);
            }
        }
        count += plane;
    }
    let mut mean = [0.0f32; 3];
    let mut std = [0.0f32; 3];
    for c in 0..3 {
        let m = sum[c] / count as f64;
        let var = (sum_sq[c] / count as f64 - m * m).max(1e-12);
        mean[c] = m as f32;
        std[c] = var.sqrt() as f32;
    }
    Normalization { mean, std }
}

/// Builds a 2N-row batch of augmented views for the given collection indices.
/// Training passes the real epoch; validation passes `epoch = 0` so its views
/// are constant across epochs. Normalization is applied last.
pub fn assemble_pair_batch(
    collection: &ImageCollection,
    indices: &[usize],
    epoch: u64,
    aug: &AugmentationConfig,
    run_seed: u64,
    norm: &Normalization,
) -> Result<PairBatch, DataError> {
    let mut images = Vec::with_capacity(indices.len() * 2);
    let mut source_indices = Vec::with_capacity(indices.len());
    for &i in indices {
        let source_index = collection.source_indices[i];
        let seed = crate::augment::view_seed(run_seed, epoch, source_index as u64);
        let pair = make_views(&collection.images[i], aug, seed, source_index)?;
        let mut a = pair.view_a;
        let mut b = pair.view_b;
        normalize(&mut a, norm);
        normalize(&mut b, norm);
        images.push(a);
        images.push(b);
        source_indices.push(source_index);
    }
    Ok(PairBatch { images, source_indices })
}
