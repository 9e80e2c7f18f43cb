use std::io;

use thiserror::Error;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, Error)]
pub enum MiaError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("format error at row {row}: {msg}")]
    Format { row: usize, msg: String },
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<MiaError>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = MiaError> = std::result::Result<T, E>;

impl MiaError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        MiaError::Dimension(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        MiaError::Argument(msg.into())
    }

    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        MiaError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by the caller's configuration rather than by
    /// the run itself.
    pub fn is_config_error(&self) -> bool {
        match self {
            MiaError::Config(_) => true,
            MiaError::Stage { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}
