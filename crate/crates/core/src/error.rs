use std::path::PathBuf;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum AwhError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("non-finite loss component `{component}` at epoch {epoch} step {step}")]
    NonFinite {
        component: &'static str,
        epoch: usize,
        step: usize,
    },

    #[error("target batch carries 3D labels; the target stream must be weakly supervised")]
    TargetLabelsPresent,

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, AwhError>;

pub(crate) fn invalid_input(msg: impl Into<String>) -> AwhError {
    AwhError::InvalidInput(msg.into())
}

pub(crate) fn invalid_config(msg: impl Into<String>) -> AwhError {
    AwhError::InvalidConfig(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> AwhError {
    let path = path.into();
    move |source| AwhError::Io { path, source }
}
