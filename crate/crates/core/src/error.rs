//! Error type shared by every stage of the pipeline.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or identifiers that do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    /// An argument outside the documented domain of an operation.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Invalid or infeasible pruning configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A NaN or infinity appeared while evaluating a layer.
    #[error("non-finite value in layer `{layer}`")]
    Numerical { layer: String },

    /// Malformed binary file; `offset` is the byte position where decoding failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn structural(msg: impl Into<String>) -> Self {
        Error::Structural(msg.into())
    }

    pub(crate) fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
