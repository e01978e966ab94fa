use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or mismatched dimensions.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value lies outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("state space has {states} states, enumeration limit is {limit}")]
    Capacity { states: u128, limit: u128 },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },

    /// Numerical failure during training (non-finite logits, loss or likelihood).
    #[error("training error: {0}")]
    Training(String),

    /// Operation invoked on an object in the wrong state (e.g. sampling an empty buffer).
    #[error("state error: {0}")]
    State(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("energy server timed out after {0:?}")]
    Timeout(std::time::Duration),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
