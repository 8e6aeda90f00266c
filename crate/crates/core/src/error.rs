use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("scene parse error at line {line}, column {column}: {message}")]
    SceneParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("scene invariant violated: {0}")]
    SceneInvalid(String),

    #[error("feature file error: {0}")]
    FeatureFormat(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("batch normalization running statistics are uninitialized; run a training forward pass first")]
    UninitializedBatchNorm,

    #[error("missing gradient for parameter '{0}'")]
    MissingGrad(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
