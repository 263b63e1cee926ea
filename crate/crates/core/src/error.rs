use std::path::PathBuf;

/// Errors raised across the crate.
///
/// Every variant maps onto one machine-readable category (see [`Error::category`]),
/// which the command-line front end prints on failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error at line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("shape mismatch in {op}: {reason}")]
    Shape { op: &'static str, reason: String },

    #[error("precondition failed in {op}: {reason}")]
    Precondition { op: &'static str, reason: String },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("mask placement error: {0}")]
    Placement(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("non-finite loss term `{term}` at step {step}")]
    NonFinite { term: String, step: u64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn shape(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Shape {
            op,
            reason: reason.into(),
        }
    }

    pub fn precondition(op: &'static str, reason: impl Into<String>) -> Self {
        Error::Precondition {
            op,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used in single-line CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config { .. } => "config",
            Error::Validation { .. } => "validation",
            Error::Shape { .. } => "shape",
            Error::Precondition { .. } => "precondition",
            Error::Layout(_) => "layout",
            Error::Placement(_) => "placement",
            Error::Integrity(_) => "integrity",
            Error::Compatibility(_) => "compatibility",
            Error::NonFinite { .. } => "non-finite",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
        }
    }
}
