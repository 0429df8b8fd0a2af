use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

impl NumericsError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        NumericsError::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;
