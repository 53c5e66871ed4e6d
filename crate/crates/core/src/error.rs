use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("backend error: {0}")]
    Backend(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("trace format error: {0}")]
    Format(String),

    #[error("not a trace")]
    NotATrace,

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("corrupt trace: {0}")]
    CorruptTrace(String),

    #[error("protocol error: {message} (line: {line})")]
    Protocol { message: String, line: String },

    #[error("request timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("bridge process exited: {0}")]
    ProcessExit(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
