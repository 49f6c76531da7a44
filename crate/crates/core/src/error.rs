use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("point {point:?} lies outside the search domain {lengths:?}")]
    DomainViolation { point: Vec<f64>, lengths: Vec<f64> },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("coefficient index sets differ ({0} vs {1} entries)")]
    IndexSetMismatch(usize, usize),

    #[error("trajectory has zero duration")]
    ZeroDuration,

    #[error("degenerate target distribution: density has no mass")]
    DegenerateTarget,

    #[error("non-finite state encountered at t = {t}")]
    NumericBlowup { t: f64 },

    #[error("riccati iteration did not converge after {0} iterations")]
    RiccatiNonConvergence(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("malformed {what} in {path}: {reason}")]
    Parse {
        what: &'static str,
        path: PathBuf,
        reason: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: &'static str, path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Parse {
            what,
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short stable identifier used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::DomainViolation { .. } => "domain_violation",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::IndexSetMismatch(..) => "index_set_mismatch",
            Error::ZeroDuration => "zero_duration",
            Error::DegenerateTarget => "degenerate_target",
            Error::NumericBlowup { .. } => "numeric_blowup",
            Error::RiccatiNonConvergence(_) => "riccati_non_convergence",
            Error::Empty(_) => "empty_input",
            Error::Parse { .. } => "parse",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
