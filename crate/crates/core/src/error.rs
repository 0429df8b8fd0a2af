use std::path::PathBuf;

use thiserror::Error;
use vlground_numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("sequence length error: {0}")]
    Length(String),

    #[error("invalid span: {0}")]
    Span(String),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint { expected: String, found: String },

    #[error("malformed data in {path}: {detail}")]
    Data { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code for the CLI: 2 configuration, 3 data, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Fingerprint { .. } => 2,
            Error::Numerics(NumericsError::InvalidConfig(_)) => 2,
            Error::Numerics(_) => 4,
            Error::Vocabulary(_)
            | Error::Alignment(_)
            | Error::Length(_)
            | Error::Span(_)
            | Error::InvalidTarget(_)
            | Error::InvalidDataset(_)
            | Error::Input(_)
            | Error::Data { .. }
            | Error::Io { .. } => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
