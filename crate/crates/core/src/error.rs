use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("access denied: {0}")]
    AccessDenied(String),

    #[error("evaluation budget exhausted: {used} used, limit {limit}, request of {requested}")]
    BudgetExhausted {
        used: u64,
        limit: u64,
        requested: u64,
    },

    #[error("invalid evaluation: {0}")]
    InvalidEvaluation(String),

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("rejection sampling exhausted {draws} prior draws with {accepted} of {required} acceptances")]
    RejectionExhausted {
        accepted: usize,
        required: usize,
        draws: u64,
    },

    #[error("stagnation at iteration {iteration}: no particle accepted at epsilon {epsilon} after {attempts} attempts")]
    Stagnation {
        iteration: usize,
        epsilon: f64,
        attempts: u64,
    },

    #[error("degenerate importance weights: {0}")]
    DegenerateWeights(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{method}: {source}")]
    Method {
        method: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Wraps the error with the name of the method that produced it.
    pub fn in_method(self, method: impl Into<String>) -> Self {
        Error::Method {
            method: method.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping method context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Method { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 config, 3 budget or stagnation, 4 simulator or protocol, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Config { .. } => 2,
            Error::BudgetExhausted { .. }
            | Error::Stagnation { .. }
            | Error::RejectionExhausted { .. } => 3,
            Error::Protocol(_) | Error::AccessDenied(_) => 4,
            _ => 1,
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}
