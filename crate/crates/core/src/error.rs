use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("node {0} is not on this tape")]
    UnknownNode(usize),

    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures that stem from validation of user input or configuration.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::Shape { .. }
                | Error::LabelOutOfRange { .. }
                | Error::DuplicateName(_)
                | Error::MissingParam(_)
                | Error::Format(_)
        )
    }

    /// True for failures caused by non-finite arithmetic.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::Numeric(_))
    }
}
