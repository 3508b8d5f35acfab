use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid horizon {0}: must be at least 1")]
    InvalidHorizon(usize),

    #[error("series of length {len} is too short for three backtest windows of horizon {horizon} (need at least {needed})")]
    SplitTooShort { len: usize, horizon: usize, needed: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("ragged series: item `{item}` has {len} timestamps, expected {expected}")]
    RaggedSeries {
        item: String,
        len: usize,
        expected: usize,
    },

    #[error("missing forecast cell: learner `{learner}`, window {window}, item `{item}`, step {step}, tau {tau}")]
    MissingCell {
        learner: String,
        window: usize,
        item: String,
        step: usize,
        tau: String,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("missing forecasts for learner `{learner}` on window {window}")]
    MissingWindow { learner: String, window: usize },

    #[error("mean weighted quantile loss undefined: all actuals are zero")]
    ZeroDenominator,

    #[error("objective became non-finite at iteration {iteration}")]
    NonFiniteObjective { iteration: usize },

    #[error("global-best enumeration supports at most 20 learners, got {0}")]
    TooManyLearners(usize),

    #[error("exponent p must lie in [1, 2], got {0}")]
    InvalidP(f64),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for errors caused by malformed or inconsistent user input, as
    /// opposed to failures while computing.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::NonFiniteObjective { .. } | Error::Csv(_) => false,
            _ => true,
        }
    }
}
