use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Mismatched shapes or violated operation preconditions.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite input: {0}")]
    NonFinite(String),

    /// An invalid model, training or data configuration.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss; `term` names the offending loss term.
    #[error("non-finite loss in term `{term}` at epoch {epoch}, step {step}")]
    NanLoss {
        term: String,
        epoch: usize,
        step: usize,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Checkpoint(_) => "checkpoint",
            Error::NanLoss { .. } => "nan_loss",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
