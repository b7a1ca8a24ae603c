use thiserror::Error;

/// Errors raised by problem construction, the closed-form solvers, the learners and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("power iteration did not converge after {iterations} steps; chain is not ergodic")]
    NonErgodic { iterations: usize },

    #[error("regularization c = {c} is not above the expansion threshold c0 = {c0}")]
    BelowThreshold { c: f64, c0: f64 },

    #[error("cannot singularize: {0}")]
    Singularize(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config { .. } | Error::BelowThreshold { .. } => 1,
            Error::Dimension(_) | Error::InvalidModel(_) | Error::Io(_) | Error::Parse(_) => 2,
            Error::NonErgodic { .. } | Error::Singularize(_) | Error::Numerical(_) => 3,
        }
    }
}
