use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch in {context}: {details}")]
    ShapeMismatch { context: String, details: String },

    /// A parameter is outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity was produced; the computation is aborted immediately.
    #[error("non-finite value produced in {0}")]
    NonFinite(String),

    /// A differentiation request that the recorded graph cannot satisfy.
    #[error("graph error: {0}")]
    Graph(String),

    /// Model construction, training or inference failure.
    #[error("model error: {0}")]
    Model(String),

    /// Malformed on-disk data (weight container, PGM, key=value file).
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, details: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            details: details.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
