use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("sequence length {len} exceeds the quadratic materialization cap {cap}; use chunked mode")]
    MaterializationCap { len: usize, cap: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("replay buffer: {0}")]
    Replay(String),

    #[error("malformed latent code: {0}")]
    Latent(String),

    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("length mismatch: {0}")]
    Length(String),

    #[error("check failed: {0}")]
    Verify(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
