//! Error type shared across the crate.

use std::fmt;
use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensors, the model, the data pipeline and training.
#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes; the message carries both shapes.
    Shape { op: &'static str, message: String },
    /// An operation received an invalid argument value.
    Argument { op: &'static str, message: String },
    /// A forward op produced a NaN or infinity. The step is aborted rather
    /// than letting the value propagate.
    NonFinite {
        op: &'static str,
        index: usize,
        value: f64,
    },
    /// Dataset discovery or splitting failed.
    Dataset(String),
    /// An image file could not be decoded.
    Decode { path: PathBuf, message: String },
    /// A checkpoint file is malformed, truncated or corrupt.
    Checkpoint { offset: u64, message: String },
    /// The checkpoint format version is not supported by this build.
    CheckpointVersion { found: u32, supported: u32 },
    /// Loading a checkpoint into a model failed; names the offending tensor.
    Load { name: String, message: String },
    /// The optimizer was handed mismatched parameter/gradient shapes.
    Optimizer { name: String, message: String },
    /// A metric is undefined for the given input (e.g. empty matrix).
    Metric(String),
    /// Configuration file could not be parsed or holds invalid values.
    Config(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, message } => write!(f, "{op}: shape error: {message}"),
            Error::Argument { op, message } => write!(f, "{op}: invalid argument: {message}"),
            Error::NonFinite { op, index, value } => write!(
                f,
                "{op}: non-finite value {value} at element {index}; aborting step"
            ),
            Error::Dataset(message) => write!(f, "dataset error: {message}"),
            Error::Decode { path, message } => {
                write!(f, "cannot decode {}: {message}", path.display())
            }
            Error::Checkpoint { offset, message } => {
                write!(f, "checkpoint error at byte {offset}: {message}")
            }
            Error::CheckpointVersion { found, supported } => write!(
                f,
                "checkpoint format version {found} not supported (this build reads version {supported})"
            ),
            Error::Load { name, message } => write!(f, "cannot load tensor `{name}`: {message}"),
            Error::Optimizer { name, message } => {
                write!(f, "optimizer error on `{name}`: {message}")
            }
            Error::Metric(message) => write!(f, "metric error: {message}"),
            Error::Config(message) => write!(f, "config error: {message}"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
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
    pub(crate) fn shape(op: &'static str, message: impl Into<String>) -> Self {
        Error::Shape {
            op,
            message: message.into(),
        }
    }

    pub(crate) fn argument(op: &'static str, message: impl Into<String>) -> Self {
        Error::Argument {
            op,
            message: message.into(),
        }
    }
}
