use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward has already been run on this tape")]
    BackwardTwice,

    #[error("{source_name}: line {line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },

    #[error("{what}: {msg} (byte offset {offset})")]
    Decode {
        what: &'static str,
        offset: usize,
        msg: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite gradient in parameter `{name}` at step {step}")]
    NonFiniteGradient { name: String, step: u64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("audio error: {0}")]
    Audio(String),

    #[error("image error on {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("scheduler has already signalled stop")]
    SchedulerStopped,

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user-supplied configuration or arguments,
    /// as opposed to failures while doing the work.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
