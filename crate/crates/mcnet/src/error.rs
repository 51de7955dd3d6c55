//! Error type shared across the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All recoverable failure modes, tagged by contract kind so callers
/// (and the CLI) can map them to exit diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shape or channel-width mismatch between arrays.
    Dimension(String),
    /// An index referred outside its valid range.
    Index(String),
    /// NaN/Inf or another numeric breakdown.
    Numeric(String),
    /// A precondition of an operation was violated.
    Contract(String),
    /// A file did not match the expected format.
    Format(String),
    /// A parse failure at a known line of a text file.
    Parse { line: usize, message: String },
    /// Invalid configuration, detected before any work is done.
    Config(String),
    /// Underlying I/O failure.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
