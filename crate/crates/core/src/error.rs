use thiserror::Error;

/// Errors shared across the testing engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in field `{field}`")]
    NonFinite { field: &'static str },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty holdout window")]
    EmptyHoldout,

    #[error("insufficient warm-up data: need {needed}, got {got}")]
    InsufficientWarmup { needed: usize, got: usize },

    #[error("covariance matrix is singular even after regularization")]
    SingularCovariance,

    #[error("degenerate class: binary feature column is constant")]
    DegenerateClass,

    #[error("degenerate split: both train and holdout parts must be non-empty")]
    DegenerateSplit,

    #[error("tester has already reached a decision")]
    TesterDecided,

    #[error("checkpoint version mismatch: expected {expected}, got {got}")]
    CheckpointVersion { expected: u32, got: u32 },

    #[error("corrupt checkpoint blob: {0}")]
    CorruptCheckpoint(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty metrics table")]
    EmptyTable,

    #[error("trial {trial} failed: {source}")]
    Trial {
        trial: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
