//! Crate-wide error type.
//!
//! One enum for the whole library keeps call sites simple; the CLI maps
//! variants onto process exit codes (usage / data / runtime).

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or map dimensions do not line up for the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An unknown configuration key was supplied.
    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    /// Geometry left the working area entirely.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// A data file failed to parse. `line` is 1-based when known.
    #[error("{path}:{line}: {msg}", line = line.map(|l| l.to_string()).unwrap_or_else(|| "?".into()))]
    Data {
        path: PathBuf,
        line: Option<usize>,
        msg: String,
    },

    /// Underlying I/O failure, annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A runtime failure that is none of the above (numeric blow-up,
    /// scheduling impossibility, ...).
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(path: impl Into<PathBuf>, line: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
