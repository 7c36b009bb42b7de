use thiserror::Error;

/// Errors produced by problem construction, solvers, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or index bounds do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A scalar or count parameter is outside its admissible range.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A text input could not be parsed; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A factorization or iteration produced non-finite or unusable values.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// An internal invariant (e.g. guaranteed merit descent) was violated.
    #[error("internal consistency violation: {0}")]
    InternalConsistency(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
