use std::path::PathBuf;

use thiserror::Error;

use crate::strategies::StepRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a model or generator contract (shapes, dimensions,
    /// token ids).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value{}: {message}", .step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numeric { step: Option<usize>, message: String },

    #[error("non-finite gradient at step {}", .0.step)]
    NonFiniteGradient(Box<StepRecord>),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("unknown registry entry `{0}`")]
    UnknownModel(String),

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(step: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            step,
            message: msg.into(),
        }
    }
}
