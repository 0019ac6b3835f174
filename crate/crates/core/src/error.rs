use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in block {block}, layer {layer}")]
    Numeric { block: usize, layer: String },

    #[error("format error in {}: {message}", file.display())]
    Format { file: PathBuf, message: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("insufficient tokens: need at least {needed}, got {got}")]
    InsufficientTokens { needed: usize, got: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("sparsity budget infeasible; binding layers: {}", binding.join(", "))]
    Infeasible { binding: Vec<String> },

    #[error("trace is missing a required capture: {0}")]
    MissingCapture(String),

    #[error("layer {layer}: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(file: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Numeric { .. } => "numeric",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::InsufficientTokens { .. } => "insufficient_tokens",
            Error::Degenerate(_) => "degenerate",
            Error::Infeasible { .. } => "infeasible",
            Error::MissingCapture(_) => "missing_capture",
            Error::Layer { source, .. } => source.kind(),
        }
    }
}
