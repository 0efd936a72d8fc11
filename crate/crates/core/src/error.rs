//! Crate-wide error type with process exit-code mapping for the CLI.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Shape/axis disagreement between tensors, naming the offending axis.
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    /// Non-finite values where the numeric contract forbids them.
    #[error("{op}: non-finite value encountered in {what}")]
    NonFinite { op: &'static str, what: &'static str },

    #[error("{op}: expected scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// CLI exit code: 2 usage/config, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::NonFinite { .. } => 4,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
