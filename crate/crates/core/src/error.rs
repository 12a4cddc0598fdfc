use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid class index {index} for {classes} classes")]
    InvalidClass { index: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("gradient vanished ({norm:e}) at iteration {iteration}")]
    VanishingGradient { iteration: usize, norm: f64 },

    #[error("insufficient source profiles: need {needed}, have {available}")]
    InsufficientProfiles { needed: usize, available: usize },

    #[error("too many malformed lines: {malformed} of {total}")]
    MalformedInput { malformed: usize, total: usize },

    #[error("report grids do not match at row {0}")]
    GridMismatch(usize),

    #[error("attack failed in cell {cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: Box<Error>,
    },

    #[error("black-box audit failed: defender {defender} served {calls} gradient calls")]
    AuditViolation { defender: String, calls: u64 },

    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),

    #[error("model format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
