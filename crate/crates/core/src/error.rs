use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reconstruction stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing asset: {0}")]
    MissingAsset(PathBuf),
    #[error("parse error in {what}: {msg}")]
    Parse { what: String, msg: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("render cache is stale: inputs differ from the forward pass")]
    StaleCache,
    #[error("key mismatch: {0}")]
    Key(String),
    #[error("dense grid of {cells} cells exceeds the budget of {budget}")]
    BudgetExceeded { cells: usize, budget: usize },
    #[error("backward called on a consumed tape")]
    UsedTape,
    #[error("scene has no ground truth: {0}")]
    MissingGroundTruth(&'static str),
    #[error("checkpoint {path} was written for a different architecture")]
    ConfigMismatch { path: PathBuf },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("at timestep {t}: {source}")]
    AtTimestep {
        t: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(what: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Parse {
            what: what.into(),
            msg: msg.into(),
        }
    }

    /// Innermost error, skipping timestep wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtTimestep { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
