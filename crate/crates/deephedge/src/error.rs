use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numerical argument fell outside the mathematical domain of an
    /// operation (negative price, tau outside the surface range, CGF
    /// argument outside the convergence strip, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration supplied by the caller (bad correlation
    /// matrix, empty state pool, inconsistent state-space choice, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A simulated or loaded state violated its invariants.
    #[error("state error: {0}")]
    State(String),

    /// A hedging policy produced an unusable action.
    #[error("strategy error at path {path}, step {step}: {message}")]
    Strategy {
        path: usize,
        step: usize,
        message: String,
    },

    /// File format or parsing failure, with row-level context when available.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
