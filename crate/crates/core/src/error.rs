use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the core library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: Location, message: String },

    #[error("unsupported patch size {got}; valid sizes are {{2, 6, 14, 30, 62, 126}}")]
    UnsupportedPatchSize { got: usize },

    #[error("non-finite {term} at step {step}")]
    NonFinite { term: String, step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where in an input a parse error was detected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Line(usize),
    Offset(usize),
    Whole,
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Line(n) => write!(f, "line {n}"),
            Location::Offset(n) => write!(f, "byte offset {n}"),
            Location::Whole => write!(f, "input"),
        }
    }
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn parse(location: Location, msg: impl Into<String>) -> Self {
        Error::Parse {
            location,
            message: msg.into(),
        }
    }
}
