use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("graph was already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("episode already finished; call reset before stepping again")]
    EpisodeFinished,

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("quadrature check failed: integral {integral} deviates from 1 by more than {tolerance}")]
    Quadrature { integral: f64, tolerance: f64 },

    #[error("singular linear system")]
    Singular,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::Shape {
            expected: expected.into(),
            got: got.into(),
        }
    }
}
