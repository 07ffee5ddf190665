//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violated a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A binary artifact failed to parse (bad magic, version, truncation).
    #[error("format error: {0}")]
    Format(String),

    /// A code index fell outside its layer's codebook.
    #[error("corrupt code: layer {layer}, frame {frame}, index {index} >= K={k}")]
    CorruptCode {
        layer: usize,
        frame: usize,
        index: usize,
        k: usize,
    },

    /// Metric is undefined for the given inputs (e.g. SNR of a zero signal).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Sequence would exceed the model's maximum length.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// Loss had no unmasked targets to average over.
    #[error("empty batch: all target positions are PAD")]
    EmptyBatch,

    /// Training produced a non-finite loss.
    #[error("training failure: non-finite loss at step {step}")]
    TrainingFailure { step: usize },

    /// Alignment pointer left its valid range.
    #[error("pointer error: {0}")]
    Pointer(String),

    /// Non-finite values reached a numeric routine.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An artifact file did not match what the caller asked to load.
    #[error("load error: {0}")]
    Load(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
