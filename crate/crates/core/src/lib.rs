//! Numerical core for contrastive-learning telemetry: the NT-Xent loss and its
//! positive/negative decomposition, seedable augmentation, dataset plumbing,
//! per-epoch metrics persistence, and overfitting-onset detection.

pub mod augment;
pub mod data;
pub mod detector;
pub mod image;
pub mod loss;
pub mod telemetry;

pub use image::ImageTensor;
pub use loss::{EmbeddingBatch, LossConfig, LossDecomposition};
