use thiserror::Error;

/// Errors raised by the eviction engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {}x{}, right is {}x{}", .left.0, .left.1, .right.0, .right.1)]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("softmax row {row} is fully masked; no valid attention target")]
    MaskedRow { row: usize },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("layer {layer} has no positive evictable score; normalization is undefined")]
    Normalization { layer: usize },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    /// True for errors caused by an infeasible or malformed request rather than
    /// a broken internal invariant.
    pub fn is_parameter(&self) -> bool {
        matches!(self, Error::Parameter(_) | Error::Shape { .. } | Error::Index(_))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
