use std::io;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// The CLI maps each variant onto an exit-code class (usage, data/format,
/// numerical), see [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or mismatched shapes between layers.
    #[error("configuration error: {0}")]
    Config(String),

    /// Shape mismatch inside a tensor operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A geometric or numerical precondition of a closed-form routine failed.
    #[error("domain error: {0}")]
    Domain(String),

    /// Corrupted or truncated binary container.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// NaN or infinity appeared in a forward pass or loss.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 1 usage/config, 2 data/format, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape { .. } => 1,
            Error::Format { .. } | Error::Io { .. } => 2,
            Error::Domain(_) | Error::NonFinite(_) | Error::MissingGradient(_) => 3,
        }
    }
}
