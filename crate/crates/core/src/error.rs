use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value in `{name}`")]
    NonFinite { name: String },

    #[error("degenerate mask: every entry is -inf")]
    DegenerateMask,

    #[error("schema error: {0}")]
    Schema(String),

    #[error("data error at line {line}: {message}")]
    Data { line: usize, message: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("metric error in domain {domain}: {source}")]
    DomainMetric {
        domain: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("guard rail: {0}")]
    GuardRail(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable machine-readable category, used for CLI exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::NonFinite { .. } => "numeric",
            Error::DegenerateMask => "mask",
            Error::Schema(_) => "schema",
            Error::Data { .. } => "data",
            Error::Split(_) => "split",
            Error::Invariant(_) => "invariant",
            Error::UndefinedMetric(_) | Error::DomainMetric { .. } => "metric",
            Error::Checkpoint(_) => "checkpoint",
            Error::GuardRail(_) => "guard-rail",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
