//! Error types shared across the crate.

use std::fmt;
use std::io;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug)]
pub enum Error {
    /// Structurally malformed input file (bad magic, truncated header, broken JSON).
    Format(String),
    /// Semantically invalid data (non-finite values, count mismatches, broken invariants).
    Data(String),
    /// Underlying filesystem failure.
    Io(io::Error),
    /// Caller violated an operation precondition.
    Argument(String),
    /// Batch construction could not satisfy the request.
    Sampling(String),
    /// An iterative numeric routine failed to converge or produced non-finite results.
    Numerical(String),
    /// Spectrum analysis on an all-zero singular spectrum.
    DegenerateSpectrum(String),
    /// Triplet mining found an anchor without a positive or negative.
    Mining(String),
    /// Retrieval evaluation had no eligible queries.
    Eval(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Format(msg) => write!(f, "format error: {msg}"),
            Self::Data(msg) => write!(f, "data error: {msg}"),
            Self::Io(err) => write!(f, "io error: {err}"),
            Self::Argument(msg) => write!(f, "argument error: {msg}"),
            Self::Sampling(msg) => write!(f, "sampling error: {msg}"),
            Self::Numerical(msg) => write!(f, "numerical error: {msg}"),
            Self::DegenerateSpectrum(msg) => write!(f, "degenerate spectrum: {msg}"),
            Self::Mining(msg) => write!(f, "mining error: {msg}"),
            Self::Eval(msg) => write!(f, "evaluation error: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Self::Io(err)
    }
}
