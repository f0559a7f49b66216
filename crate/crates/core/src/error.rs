//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SefiError>;

#[derive(Debug, Error)]
pub enum SefiError {
    /// Invalid dimensions, hyper-parameters or backend configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller-supplied value is out of range or otherwise malformed.
    #[error("input error: {0}")]
    Input(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("prompt error: {0}")]
    Prompt(String),
    /// An operation was invoked before its prerequisites were produced.
    #[error("sequencing error: {0}")]
    Sequencing(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(
        "non-finite loss at timestep {timestep} (stage {stage}): total={total}, kv={kv}, attention={attention}"
    )]
    NonFiniteLoss {
        timestep: usize,
        stage: usize,
        total: f64,
        kv: f64,
        attention: f64,
    },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl SefiError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        SefiError::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        SefiError::Input(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        SefiError::Shape(msg.into())
    }

    pub(crate) fn prompt(msg: impl Into<String>) -> Self {
        SefiError::Prompt(msg.into())
    }
}
