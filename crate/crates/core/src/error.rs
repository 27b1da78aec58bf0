use thiserror::Error;

use crate::taskgen::SampleId;

/// Errors raised across the training pipeline.
#[derive(Debug, Error)]
pub enum DppoError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown sample id {0}")]
    UnknownSample(SampleId),

    #[error("statistic undefined: {0}")]
    UndefinedStat(String),

    #[error("non-finite values during {phase} (loop {loop_index}): {detail}")]
    NonFinite {
        phase: String,
        loop_index: usize,
        detail: String,
    },

    #[error("SFT diverged in loop {loop_index}: mean NLL rose from {initial:.6} to {current:.6}")]
    Divergence {
        loop_index: usize,
        initial: f64,
        current: f64,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = DppoError> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> DppoError {
    DppoError::Config(msg.into())
}

pub(crate) fn contract_err(msg: impl Into<String>) -> DppoError {
    DppoError::Contract(msg.into())
}
