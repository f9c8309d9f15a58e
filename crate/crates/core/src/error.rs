use thiserror::Error;

use crate::harness::RoundTrace;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric parameter (k, mu, weights, ...) is outside its valid range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input data violates a shape or finiteness contract.
    #[error("input error: {0}")]
    Input(String),

    /// An operation was invoked in a state that does not support it.
    #[error("state error: {0}")]
    State(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// The loss became non-finite or exceeded the divergence bound. `trace`
    /// holds every round up to and including the offending one.
    #[error("run diverged at round {round} (loss {loss:e})")]
    Diverged {
        round: usize,
        loss: f64,
        trace: Vec<RoundTrace>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn length_mismatch(what: &str, expected: usize, got: usize) -> Self {
        Error::Input(format!("{what}: expected length {expected}, got {got}"))
    }
}
