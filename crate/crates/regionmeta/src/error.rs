//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by tensor construction, shape checks, and differentiation.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {op} got {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("element count mismatch: shape {shape:?} holds {expected} values, got {got}")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("gradient root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("batchnorm needs at least 2 values per channel, got {0}")]
    DegenerateStatistics(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("duplicate parameter name: {0}")]
    DuplicateParamName(String),
    #[error("unknown parameter name: {0}")]
    UnknownParamName(String),
    #[error("{0}")]
    Invalid(String),
}

/// Errors from model configuration and application.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Errors from dataset generation, splitting, sampling, and tile file IO.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("task sampling exhausted: no region in {meta_set} has {ways} classes with {shots} support and {queries} query tiles")]
    SamplingExhausted {
        meta_set: String,
        ways: usize,
        shots: usize,
        queries: usize,
    },
    #[error("k-means needs at least {clusters} items, got {items}")]
    TooFewItems { items: usize, clusters: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic at byte offset 0 (expected \"GTIL\")")]
    BadMagic { path: String },
    #[error("{path}: unsupported tile format version {version}")]
    UnsupportedVersion { path: String, version: u32 },
    #[error("{path}: truncated at byte offset {offset}")]
    Truncated { path: String, offset: usize },
    #[error("{path}: label {label} out of range (max {max})")]
    LabelOutOfRange { path: String, label: u8, max: u8 },
    #[error("{path}: malformed index line {line}: {reason}")]
    BadIndexLine {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Errors from the training procedures and checkpoint IO.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("adapt called with empty support and {steps} steps")]
    EmptySupport { steps: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic at byte offset 0 (expected \"MAMLCKPT\")")]
    BadMagic { path: String },
    #[error("{path}: unsupported checkpoint version {version}")]
    UnsupportedVersion { path: String, version: u32 },
    #[error("{path}: truncated at byte offset {offset}")]
    Truncated { path: String, offset: usize },
    #[error("{path}: invalid provenance byte {0}", .byte)]
    BadProvenance { path: String, byte: u8 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Errors from metric computation.
#[derive(Debug, Error)]
pub enum MetricError {
    #[error("metric undefined on an empty confusion matrix")]
    Empty,
    #[error("labels length mismatch: {truth} true vs {predicted} predicted")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("kappa undefined: expected agreement is 1 (single-class degenerate)")]
    DegenerateKappa,
    #[error("mean IoU undefined: every class was skipped")]
    AllClassesSkipped,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Errors from the analysis tools.
#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("PCA needs at least 2 vectors, got {0}")]
    TooFewVectors(usize),
    #[error("PCA components ({components}) exceed vector length ({length})")]
    TooManyComponents { components: usize, length: usize },
    #[error("PCA input has zero variance in every direction")]
    DegenerateInput,
    #[error("vector length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}
