use std::path::PathBuf;

/// Errors raised anywhere in the library.
///
/// The variants map one-to-one onto the CLI exit codes, so callers can
/// distinguish configuration mistakes from data problems and numeric
/// blow-ups without string matching.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Dimension(_) => 3,
            Error::Numeric(_) => 4,
            Error::Format { .. } => 5,
            Error::Io { .. } => 6,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
