use thiserror::Error;

use crate::searchspace::ArchId;

/// Errors produced by the reduction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate space: {0}")]
    DegenerateSpace(String),

    #[error("singular kernel (lambda_min = {lambda_min:e}, lambda_max = {lambda_max:e})")]
    SingularKernel { lambda_min: f64, lambda_max: f64 },

    #[error("degenerate jacobian: sample {0} has zero variance")]
    DegenerateJacobian(usize),

    #[error("no statistics for architecture {0}")]
    MissingStat(ArchId),

    #[error("no accuracy for architecture {0}")]
    MissingAccuracy(ArchId),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("duplicate key {0}")]
    DuplicateKey(String),

    #[error("need at least two clusters, found {0}")]
    InsufficientClusters(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
