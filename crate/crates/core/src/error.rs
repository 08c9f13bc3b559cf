use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("degenerate latent pair: distance {distance:e} is not above {threshold:e}")]
    DegeneratePair { distance: f64, threshold: f64 },

    #[error("non-finite value in loss term `{term}`")]
    NonFinite { term: String },

    #[error("invalid configuration: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Config(Vec<crate::domain::ConfigViolation>),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config mismatch: checkpoint config hash {found} does not match run config hash {expected}")]
    ConfigMismatch { expected: String, found: String },

    #[error("incomplete run at {path}: {reason}")]
    IncompleteRun { path: PathBuf, reason: String },

    #[error("{path}: {reason}")]
    Data { path: PathBuf, reason: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Short machine-readable tag used by the command line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::InvalidState(_) => "invalid-state",
            Error::DegeneratePair { .. } => "degenerate-pair",
            Error::NonFinite { .. } => "abort-step",
            Error::Config(_) => "invalid-config",
            Error::Checkpoint { .. } => "checkpoint",
            Error::ConfigMismatch { .. } => "config-mismatch",
            Error::IncompleteRun { .. } => "incomplete-run",
            Error::Data { .. } => "data",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
            Error::Tensor(_) => "tensor",
        }
    }
}
