use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed mask: row {row} has no attendable column")]
    MalformedMask { row: usize },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("index error: {index} outside [0, {max}]")]
    Index { index: usize, max: usize },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("training error at step {step}: non-finite loss {loss} (t={timesteps:?}, plan={plan:?})")]
    Training {
        step: usize,
        loss: f64,
        timesteps: Vec<usize>,
        plan: Vec<usize>,
    },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::MalformedMask { .. } => "malformed_mask",
            Error::Contract(_) => "contract",
            Error::Index { .. } => "index",
            Error::Eval(_) => "eval",
            Error::Training { .. } => "training",
            Error::Metric(_) => "metric",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
