//! Training-side machinery: candle-backed encoder/projection models, the
//! differentiable NT-Xent route, the epoch loop with telemetry and
//! detector-driven early stopping, plotting, and the CLI plumbing.

pub mod cli;
pub mod config;
pub mod fixture;
pub mod model;
pub mod plot;
pub mod tensor_loss;
pub mod trainer;
