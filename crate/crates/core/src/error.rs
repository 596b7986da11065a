use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A record violates a data-model invariant.
    #[error("invalid {what}: {message}")]
    Invalid { what: String, message: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("backward called before forward")]
    NoForward,

    #[error("non-finite {0}")]
    NonFinite(&'static str),

    #[error("training error: {0}")]
    Training(String),

    /// Metric undefined because only one class is present.
    #[error("single-class input: {0}")]
    SingleClass(String),

    #[error("missing labels: {0}")]
    Unlabeled(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            what: what.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Invalid { .. } => "invalid",
            Error::Dimension { .. } => "dimension",
            Error::NoForward => "no_forward",
            Error::NonFinite(_) => "non_finite",
            Error::Training(_) => "training",
            Error::SingleClass(_) => "single_class",
            Error::Unlabeled(_) => "unlabeled",
            Error::Config(_) => "config",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
