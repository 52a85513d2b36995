use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, invalid hyperparameters, layout mismatches.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("LiSSA diverged in repetition {repetition} at iteration {iteration} (|h| = {norm:.3e}); increase the scale")]
    Divergence {
        repetition: usize,
        iteration: usize,
        norm: f64,
    },

    #[error("capability error: {0}")]
    Capability(String),

    #[error("Hessian is numerically singular (min eigenvalue {min_eigenvalue:.3e}); use a positive damping")]
    Singular { min_eigenvalue: f64 },

    #[error("selection exhausted: no {0} candidates available")]
    SelectionExhausted(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Errors caused by the numbers rather than by the inputs' shape.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_) | Error::Training { .. } | Error::Divergence { .. } | Error::Singular { .. }
        )
    }
}
