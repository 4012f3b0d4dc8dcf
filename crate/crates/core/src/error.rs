use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("tilting solver did not converge after {iterations} iterations (residual norm {residual_norm:e})")]
    TiltingNotConverged { iterations: usize, residual_norm: f64 },

    #[error("tilting solver diverged, source features cannot reproduce the target moments (residual norm {residual_norm:e})")]
    TiltingSeparation { residual_norm: f64 },

    #[error("overlap violation: {0}")]
    OverlapViolation(String),

    #[error("every site was excluded: {0}")]
    AllSitesExcluded(String),

    #[error("selection probabilities do not sum to one at a probe point (deviation {deviation:e})")]
    SelectionNotNormalized { deviation: f64 },

    #[error("federated training diverged after {rounds} rounds")]
    FedAvgDiverged { rounds: usize, trace: Vec<f64> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
