//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration (bad key, out-of-range value, indivisible dims).
    #[error("config error: {0}")]
    Config(String),

    /// A variable was used with a graph that did not produce it, a backward
    /// pass was started from a non-scalar, or a gradient is missing where the
    /// contract requires one.
    #[error("graph contract violation: {0}")]
    Graph(String),

    /// Non-finite values or a failed numerical check.
    #[error("numerical failure: {0}")]
    Numeric(String),

    /// Metric evaluation over an empty pixel mask.
    #[error("no valid pixels in evaluation mask")]
    NoValidPixels,

    /// Malformed image or checkpoint data. `offset` is the byte position at
    /// which parsing stopped, when known.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { msg: String, offset: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn graph(msg: impl Into<String>) -> Self {
        Error::Graph(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn parse(msg: impl Into<String>, offset: usize) -> Self {
        Error::Parse {
            msg: msg.into(),
            offset,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
