use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),

    #[error("configuration has {config} layers but geometry has {geometry}")]
    LengthMismatch { config: usize, geometry: usize },

    #[error("layer {layer}: {value} is not in the search space {axis} set")]
    OutOfSpace {
        layer: usize,
        axis: &'static str,
        value: u32,
    },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("average is undefined: total frozen parameter count is zero")]
    UndefinedAverage,

    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),

    #[error("correlation is undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("budget of {budget} bytes is below the minimal achievable footprint of {minimum} bytes")]
    InfeasibleBudget { budget: u64, minimum: u64 },

    #[error("covariance factorization failed after jitter escalation to {jitter:e}")]
    Factorization { jitter: f64 },

    #[error("evaluator error: {0}")]
    Evaluator(String),

    #[error("protocol error: {message} (payload: {payload:?})")]
    Protocol { message: String, payload: String },

    #[error("evaluator timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
