use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate spline speed {speed:e} at t = {t}")]
    DegenerateSpeed { t: f64, speed: f64 },
    #[error("non-finite parameter in layer `{layer}`")]
    NonFinite { layer: String },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("architecture signature mismatch: expected `{expected}`, found `{found}`")]
    SignatureMismatch { expected: String, found: String },
    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("training diverged at iteration {iteration}: mean cost {mean_cost}")]
    Divergence { iteration: usize, mean_cost: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing weights for network {0}")]
    MissingWeights(usize),
    #[error("could not place obstacle {index} after {attempts} attempts")]
    Placement { index: usize, attempts: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
