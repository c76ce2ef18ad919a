use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("zero points")]
    ZeroPoints,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error("incompatible version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used by the CLI for machine-readable failures.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } | Error::ZeroPoints => "parse",
            Error::NonFinite(_) => "numeric",
            Error::InvalidArgument(_) => "argument",
            Error::Shape(_) => "shape",
            Error::LabelOutOfRange { .. } | Error::EmptyDataset => "data",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
        }
    }
}
