use thiserror::Error;

#[derive(Debug, Error)]
pub enum GvlError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence { epoch: usize, step: usize, detail: String },
    #[error("checkpoint incompatible: {0}")]
    Checkpoint(String),
    #[error("unknown experiment mode `{0}`")]
    UnknownMode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("plotting failed: {0}")]
    Plot(String),
}

pub type Result<T> = std::result::Result<T, GvlError>;

pub(crate) fn invalid_input(msg: impl Into<String>) -> GvlError {
    GvlError::InvalidInput(msg.into())
}

pub(crate) fn invalid_config(msg: impl Into<String>) -> GvlError {
    GvlError::InvalidConfig(msg.into())
}
