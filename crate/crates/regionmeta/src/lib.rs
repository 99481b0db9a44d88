//! Episodic meta-learning engine for region-shifted tile data.
//!
//! The crate provides, end to end:
//!
//! - [`tensor`]: `f64` tensors with reverse-mode autodiff that supports
//!   gradients of gradients, enough for second-order meta-updates;
//! - [`models`]: a compact stacked-conv classifier and a mini U-Net,
//!   built as pure [`tensor::ParamSet`]s;
//! - [`data`]: region-tagged datasets, synthetic region-shift generation,
//!   meta-splits (random and k-means clustered), k-shot n-way task
//!   sampling, and a binary tile-file format;
//! - [`train`]: plain gradient-descent pretraining, episodic
//!   meta-training with second-order outer updates, per-task adaptation,
//!   fine-tuning grid search, and checkpointing;
//! - [`metrics`]: confusion-matrix metrics (accuracy, Cohen's kappa,
//!   mean IoU) and per-shot evaluation curves;
//! - [`analysis`]: weight-space PCA of task adaptations and 1-D loss
//!   slices along a support gradient.
//!
//! Everything is deterministic: one global seed, split per purpose via
//! [`rng::derive_seed`], reproduces every artifact bit for bit.

pub mod analysis;
pub mod data;
pub mod error;
pub mod fdcheck;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{AnalysisError, DataError, MetricError, TensorError, TrainError};
pub use rng::Rng;
pub use tensor::{ParamSet, Tensor};
