use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the prevalence pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("config line {line}: {message}")]
    ConfigSyntax { line: usize, message: String },

    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    #[error("invalid kernel: {0}")]
    Kernel(String),

    #[error("unknown location index {0}")]
    UnknownLocation(usize),

    #[error("unknown cohort index {0}")]
    UnknownCohort(usize),

    #[error("unknown disease `{0}`")]
    UnknownDisease(String),

    #[error("unknown {dimension} `{value}`")]
    UnknownLevel { dimension: String, value: String },

    #[error("profile outside grid: {0}")]
    OffGrid(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("requested {requested} particles but the ensemble has only {available} draws")]
    ThinningTooLarge { requested: usize, available: usize },

    #[error("missing demographic cell {0} in margins")]
    MissingMargins(String),

    #[error("no weight estimate for demographic cell {0}")]
    MissingWeights(String),

    #[error("empty subgroup: {0}")]
    EmptySubgroup(String),

    #[error("stratification over `{dimension}` has {levels} levels (maximum {max}); {guidance}")]
    TooManyStrata {
        dimension: String,
        levels: usize,
        max: usize,
        guidance: String,
    },

    #[error("store format: {0}")]
    Format(String),

    #[error("store digest mismatch: {0}")]
    Digest(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// True for errors that indicate a damaged or foreign store file.
    pub fn is_corruption(&self) -> bool {
        matches!(self, Error::Format(_) | Error::Digest(_))
    }
}
