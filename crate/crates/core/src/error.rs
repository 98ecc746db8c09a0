use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("time {t} outside the admissible range {range}")]
    InvalidTime { t: f64, range: &'static str },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("non-finite state at t = {t}")]
    NonFiniteState { t: f64 },

    #[error("trajectory {trajectory} (iteration {iteration:?}) failed: {source}")]
    Trajectory {
        iteration: Option<usize>,
        trajectory: usize,
        #[source]
        source: Box<FlowError>,
    },

    #[error("practical mode needs the model's clean-data prediction")]
    MissingPrediction,

    #[error("reward evaluation failed: {0}")]
    Reward(String),

    #[error("{path}:{line}: {reason}")]
    Format {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FlowError>;
