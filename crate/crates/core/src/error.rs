use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the stylization toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid latent code: {0}")]
    InvalidCode(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("style mismatch: expected {expected}, found {found}")]
    StyleMismatch { expected: String, found: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("failed to load {}: field `{field}`: {reason}", path.display())]
    Load {
        path: PathBuf,
        field: String,
        reason: String,
    },

    /// A loss or parameter became non-finite during optimization.
    #[error("numeric abort at {at}: {detail}")]
    NumericAbort { at: String, detail: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn load(path: impl Into<PathBuf>, field: impl Into<String>, reason: impl ToString) -> Self {
        Error::Load {
            path: path.into(),
            field: field.into(),
            reason: reason.to_string(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
