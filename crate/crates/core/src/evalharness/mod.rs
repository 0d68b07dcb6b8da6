//! Evaluation machinery: classifier metrics, dataset assembly and the blinded
//! judging protocol with its rating statistics.

pub mod datasets;
pub mod judging;
pub mod metrics;
pub mod stats;

use thiserror::Error;

pub use datasets::{assemble_training_pairs, LabeledSource, TrainingSet};
pub use judging::{
    compare_groups, guess_f1, BlindedPool, Dimension, ExtractionSet, Guess, JudgingItem, JudgingRecord,
    JudgingStore, Provenance,
};
pub use metrics::{micro_f1, LabeledPair, MetricReport};
pub use stats::mann_whitney_u;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("missing predictions at indices {0:?}")]
    MissingPredictions(Vec<usize>),
    #[error("{field}: {message}")]
    Validation { field: String, message: String },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("underpowered comparison: {n_a} vs {n_b} ratings (need at least 2 each)")]
    Underpowered { n_a: usize, n_b: usize },
    #[error("source {source_name}: no mapping for label {label:?}")]
    UnmappedLabel { source_name: String, label: String },
    #[error("malformed input: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(String),
}
