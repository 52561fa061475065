use std::error::Error as StdError;
use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the tokenizer, generator and pipeline stages.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    Dimension(String),
    /// An attention mask row permits no key position.
    MaskedRow { row: usize },
    /// Hierarchy/grid arithmetic is impossible (divisibility, empty layout, ...).
    Geometry(String),
    /// Invalid configuration value or combination.
    Config(String),
    /// Missing or malformed input data / artifact.
    Data(String),
    /// A numeric failure (NaN loss, non-finite logits, ...).
    Numeric(String),
    /// An operation was applied in a state that does not admit it.
    State(String),
    /// Byte-level parse failure of a checkpoint, code dump or image file.
    Parse(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::MaskedRow { row } => {
                write!(f, "mask row {row} allows no position to attend to")
            }
            Error::Geometry(msg) => write!(f, "geometry error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric failure: {msg}"),
            Error::State(msg) => write!(f, "state error: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl StdError for Error {
    fn source(&self) -> Option<&(dyn StdError + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Parse(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
