use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Validation(String),

    #[error("stage error: {0}")]
    Stage(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("insufficient data: need at least {required} images, dataset has {available}")]
    InsufficientData { required: usize, available: usize },

    #[error("no usable image/caption pairs in {}", .0.display())]
    EmptyDataset(PathBuf),

    #[error("non-finite loss: {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Png(#[from] png::EncodingError),

    #[error(transparent)]
    Safetensors(#[from] safetensors::SafeTensorError),
}

impl Error {
    /// Short machine-readable category used by the command line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Validation(_) => "validation",
            Error::Stage(_) => "stage",
            Error::Data(_) | Error::InsufficientData { .. } | Error::EmptyDataset(_) => "data",
            Error::NonFinite(_) => "non_finite",
            Error::Checkpoint(_) | Error::Safetensors(_) => "checkpoint",
            Error::Internal(_) => "internal",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Image(_) | Error::Png(_) => "image",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
