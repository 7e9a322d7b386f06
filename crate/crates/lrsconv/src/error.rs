use thiserror::Error;

/// Failure classes for the whole crate. Every message carries the concrete
/// numbers involved so callers can act without re-deriving context.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes or construction arguments are inconsistent.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration knob is outside its valid range.
    #[error("config error: {0}")]
    Config(String),

    /// Sparse entry invariants violated (ordering, duplicates, bounds).
    #[error("sparse error: {0}")]
    Sparse(String),

    /// Binary container could not be decoded.
    #[error("format error: {0}")]
    Format(String),

    /// Text input (catalog CSV, path list) could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// A run would exceed the working-memory guard.
    #[error("resource limit: {0}")]
    ResourceLimit(String),

    // The cause lives in the message, not in `source()`, so chain printers
    // don't repeat it.
    #[error("io error: {0}")]
    Io(std::io::Error),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
