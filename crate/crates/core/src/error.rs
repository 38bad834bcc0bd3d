use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value out of range: {0}")]
    Range(String),

    #[error("malformed structured output: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("argument outside the function domain: {0}")]
    Domain(String),

    #[error("unsupported loss `{0}`")]
    UnsupportedLoss(String),

    #[error("training diverged at step {step}: {detail}")]
    TrainingDiverged { step: usize, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("could not decode {path}: {detail}")]
    Decode { path: PathBuf, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn decode(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        Error::Decode { path: path.into(), detail: detail.to_string() }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Range(_) | Error::Domain(_) | Error::UnsupportedLoss(_) => 2,
            Error::Format(_) => 2,
            Error::TrainingDiverged { .. } => 3,
            Error::Io { .. } | Error::Decode { .. } => 4,
        }
    }

    /// Short machine-readable tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Range(_) => "range",
            Error::Format(_) => "format",
            Error::Config(_) => "config",
            Error::Domain(_) => "domain",
            Error::UnsupportedLoss(_) => "unsupported_loss",
            Error::TrainingDiverged { .. } => "training_diverged",
            Error::Io { .. } => "io",
            Error::Decode { .. } => "decode",
        }
    }
}
