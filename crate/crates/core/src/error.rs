//! Error types shared across the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes surfaced by the engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor or layer shape does not match its declaration. Carries the
    /// offending layer index when known.
    Structural { layer: Option<usize>, message: String },
    /// A computation produced a non-finite value.
    Numeric { layer: Option<usize>, message: String },
    /// The requested operation is not defined for this configuration
    /// (e.g. conservation checks on non-homogeneous layers).
    Unsupported { message: String },
    /// Domain violation on an operation input (empty score map, no prunable
    /// layers, label out of range, ...).
    Domain { message: String },
    /// Configuration file could not be parsed or fails validation.
    Config { message: String },
    /// Report emission failed at the filesystem level.
    Io { path: String, message: String },
}

impl Error {
    pub fn structural(layer: impl Into<Option<usize>>, message: impl Into<String>) -> Self {
        Error::Structural { layer: layer.into(), message: message.into() }
    }

    pub fn numeric(layer: impl Into<Option<usize>>, message: impl Into<String>) -> Self {
        Error::Numeric { layer: layer.into(), message: message.into() }
    }

    pub fn unsupported(message: impl Into<String>) -> Self {
        Error::Unsupported { message: message.into() }
    }

    pub fn domain(message: impl Into<String>) -> Self {
        Error::Domain { message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Error::Config { message: message.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Structural { layer: Some(l), message } => {
                write!(f, "structural error at layer {l}: {message}")
            }
            Error::Structural { layer: None, message } => {
                write!(f, "structural error: {message}")
            }
            Error::Numeric { layer: Some(l), message } => {
                write!(f, "numeric error at layer {l}: {message}")
            }
            Error::Numeric { layer: None, message } => write!(f, "numeric error: {message}"),
            Error::Unsupported { message } => write!(f, "unsupported configuration: {message}"),
            Error::Domain { message } => write!(f, "domain error: {message}"),
            Error::Config { message } => write!(f, "config error: {message}"),
            Error::Io { path, message } => write!(f, "io error on {path}: {message}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io { path: String::new(), message: e.to_string() }
    }
}
