use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch on axis {axis}: {message}")]
    ShapeMismatch { axis: usize, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    #[error("bad magic in {path}: expected {expected}")]
    BadMagic { path: String, expected: String },

    #[error("payload size mismatch in {path}: {detail}")]
    PayloadMismatch { path: String, detail: String },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: String, detail: String },

    #[error("checkpoint/config mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
