use thiserror::Error;

pub type Result<T> = std::result::Result<T, SlipError>;

#[derive(Debug, Error)]
pub enum SlipError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("capacity exceeded: {what} has {got} tokens, limit is {limit}")]
    Capacity {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("test undefined: {0}")]
    UndefinedTest(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SlipError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        SlipError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
