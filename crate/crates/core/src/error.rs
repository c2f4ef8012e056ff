//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Dataset or agent input violates a type invariant. Carries the full
    /// itemized list so a caller can report every problem at once.
    #[error("invalid input:\n{}", items.join("\n"))]
    Validation { items: Vec<String> },

    /// Covariate encoding failed (zero-variance column, unseen level, ...).
    #[error("encoding error: {0}")]
    Encoding(String),

    /// A matrix factorization failed or a design matrix is rank deficient.
    #[error("linear algebra error: {0}")]
    LinearAlgebra(String),

    /// A Gibbs step failed; reports the sweep index and step name.
    #[error("sampler error at iteration {iter}, step {step}: {detail}")]
    Sampler {
        iter: usize,
        step: &'static str,
        detail: String,
    },

    /// Agent fitting failed (non-convergence, separation, arm too small, ...).
    #[error("agent error: {0}")]
    Agent(String),

    /// Scenario or run configuration is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// Prediction input is inconsistent with the trained chain.
    #[error("prediction error: {0}")]
    Prediction(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(items: Vec<String>) -> Self {
        Error::Validation { items }
    }
}
