use std::path::PathBuf;

use thiserror::Error;

use crate::model::StageKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{field}: file not found: {}", path.display())]
    MissingFile { field: String, path: PathBuf },

    #[error("unsupported tensor-parallel degree {tp} for {stage:?} (supported: {supported:?})")]
    UnsupportedTp {
        stage: StageKind,
        tp: u32,
        supported: Vec<u32>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("batch of {batch} exceeds max batch {max_batch}")]
    BatchOverflow { batch: u32, max_batch: u32 },

    #[error("trace {}: {reason}", path.display())]
    Trace { path: PathBuf, reason: String },

    #[error("scaling rejected: {0}")]
    Scaling(String),

    #[error("simulation deadlocked at t={time_ms:.3}ms: {dump}")]
    Deadlock { time_ms: f64, dump: String },

    #[error("invariant violated at t={time_ms:.3}ms: {what}")]
    Invariant { time_ms: f64, what: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
