use std::io;

use thiserror::Error;

/// Errors produced anywhere in the training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("buffer capacity must be positive")]
    ZeroCapacity,
    #[error("cannot sample from an empty buffer")]
    EmptyBuffer,
    #[error("requested {requested} items but only {available} are stored")]
    NotEnoughItems { requested: usize, available: usize },
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("maze generation failed after {attempts} attempts")]
    MazeGeneration { attempts: usize },
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("forward cache does not belong to the current parameters")]
    StaleCache,
    #[error("non-finite value in {context} at step {step}")]
    NonFinite { context: String, step: u64 },
    #[error("value cache does not match the batch: {0}")]
    ValueCache(String),
    #[error("invalid MDP: {0}")]
    InvalidMdp(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: &str, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn non_finite(context: impl Into<String>, step: u64) -> Self {
        Error::NonFinite {
            context: context.into(),
            step,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
