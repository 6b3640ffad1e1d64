use std::path::PathBuf;

use thiserror::Error;

use crate::topology::NodeId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TopologyError {
    #[error("node {0} is not a leaf")]
    NotALeaf(NodeId),
    #[error("growing node {node} would exceed the maximum depth {max_depth}")]
    DepthExceeded { node: NodeId, max_depth: usize },
    #[error("the root cannot be pruned")]
    CannotPruneRoot,
    #[error("node {0} is not part of the tree")]
    UnknownNode(NodeId),
    #[error("invalid topology: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("node {0} has not been grown")]
    NotGrown(NodeId),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("corrupt checkpoint: field `{field}`: {reason}")]
    CorruptCheckpoint { field: String, reason: String },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("non-positive variance {value} at index {index}")]
    NonPositiveVariance { index: usize, value: f64 },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ObjectiveError {
    #[error("invalid likelihood `{0}`; expected `bernoulli` or `gaussian`")]
    InvalidLikelihood(String),
    #[error("contrastive loss needs at least two positive pairs, got {0}")]
    DegenerateBatch(usize),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("dendrogram purity needs at least one pair of samples sharing a class")]
    NoSameClassPairs,
    #[error("instance too large for brute force: {0}")]
    TooLarge(String),
    #[error("empty input")]
    Empty,
    #[error("assignment/label length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset `{name}` not found under {root}: {hint}")]
    MissingData { name: String, root: PathBuf, hint: String },
    #[error("augmentation needs image-shaped inputs, dataset has shape {0:?}")]
    NotAnImage(Vec<usize>),
    #[error("malformed data file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no leaf is eligible for growth")]
    NoEligibleLeaf,
    #[error("non-finite loss in epoch {epoch}: term `{term}` = {value}")]
    NumericalFailure { epoch: usize, term: String, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Anything a command can fail with, mapped onto process exit codes.
#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dataset input shape {dataset:?} does not match the checkpoint's {checkpoint:?}")]
    ShapeMismatch {
        dataset: Vec<usize>,
        checkpoint: Vec<usize>,
    },
    #[error("cannot write {path}: {reason}")]
    Output { path: PathBuf, reason: String },
}

impl RunError {
    /// 2 configuration, 3 data, 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Data(_) | RunError::ShapeMismatch { .. } | RunError::Train(TrainError::Data(_)) => 3,
            RunError::Train(TrainError::NumericalFailure { .. }) => 4,
            _ => 1,
        }
    }
}
