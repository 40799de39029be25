use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    Param { field: &'static str, reason: String },

    #[error("shape mismatch: expected {expected}, got {found}")]
    Shape { expected: usize, found: usize },

    #[error("non-finite value encountered in {context}")]
    Numeric { context: String },

    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("{configs} configurations exceed the enumeration cap of {cap}; use the relaxed gradient search instead")]
    EnumerationCap { configs: u128, cap: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: not a {what} file (bad magic bytes)")]
    Magic { path: PathBuf, what: &'static str },

    #[error("{path}: format version {found} is not supported (this build reads version {supported})")]
    Version { path: PathBuf, found: u32, supported: u32 },

    #[error("{path}: file is truncated ({reason})")]
    Truncated { path: PathBuf, reason: String },

    #[error("{path}: checksum mismatch, file is corrupt")]
    Checksum { path: PathBuf },

    #[error("{path}: malformed header: {reason}")]
    Header { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Error {
    Error::Param { field, reason: reason.into() }
}

pub(crate) fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Shape { expected, found })
    }
}

pub(crate) fn check_finite(values: &[f64], context: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { context: context.to_string() })
    }
}
