use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty book")]
    EmptyBook,

    #[error("word range [{start}, {end}) is invalid for a book of {len} words")]
    InvalidRange { start: usize, end: usize, len: usize },

    #[error("generation references unknown excerpt {0}")]
    UnknownExcerpt(usize),

    #[error("no prompt record for excerpt {0}")]
    MissingPrompt(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("degenerate input: {0}")]
    Degenerate(&'static str),

    #[error("zero-norm embedding vector")]
    ZeroNorm,

    #[error("book too small to rank ({0} excerpts)")]
    BookTooSmall(usize),

    /// A remote provider (corpus count, embedding or text generation service)
    /// failed after the retry budget was spent.
    #[error("{service} failed for {context}: {message}")]
    Provider {
        service: &'static str,
        context: String,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}: {source}", path.display())]
    Json {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// True for failures of an external service, as opposed to bad data.
    pub fn is_provider(&self) -> bool {
        matches!(self, Error::Provider { .. })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
