use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Input did not parse as the expected interchange format.
    #[error("format error in document {doc_index} at `{field}`: {message}")]
    Format {
        doc_index: usize,
        field: String,
        message: String,
    },

    /// Input parsed but violates a data invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("encoder error: {0}")]
    Encoder(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("prompt for {doc_id} chunk {chunk_index} is {size} chars, over the budget of {budget}; use a smaller pairs-per-input value")]
    PromptTooLong {
        doc_id: String,
        chunk_index: usize,
        size: usize,
        budget: usize,
    },

    #[error("backend error for {tag}: {message}")]
    Backend { tag: String, message: String },

    #[error("embedder error: {0}")]
    Embedder(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
