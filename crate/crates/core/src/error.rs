use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },

    #[error("timestamps are not strictly increasing at data row {row}")]
    NonMonotonicTimestamps { row: usize },

    #[error("series has no data rows")]
    EmptySeries,

    #[error("irregular sampling: {0}")]
    IrregularSampling(String),

    #[error("{split} split holds {rows} rows but at least {required} are required")]
    SplitTooSmall {
        split: &'static str,
        rows: usize,
        required: usize,
    },

    #[error("series of length {len} is shorter than the {required} rows a window needs")]
    SeriesTooShort { len: usize, required: usize },

    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("segment of length {len} cannot hold an overlap of {min_overlap}")]
    SegmentTooShort { len: usize, min_overlap: usize },

    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("memory queue is empty and warm-up is disabled")]
    EmptyQueueWithoutWarmup,

    #[error("normal equations are singular (alpha = 0 with rank-deficient features)")]
    SingularSystem,

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("forecast head is not differentiable")]
    NonDifferentiableHead,

    #[error("no model for dataset {dataset} at horizon {horizon}")]
    MissingCell { dataset: String, horizon: usize },

    #[error("conflicting cells: {0}")]
    ConflictingCells(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
