use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("model has no transition {from} -> {to}")]
    UnknownTransition { from: usize, to: usize },

    #[error("state {0} is outside the model's state space")]
    InvalidState(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical procedure did not converge: {0}")]
    Convergence(String),

    #[error(
        "matrix is not positive definite (pivot {pivot} = {value:e}); \
         use the pseudo-inverse stage statistic and check the invertibility report"
    )]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("planning covariance is singular: {0}; see the invertibility report")]
    SingularPlanning(String),

    #[error("target power unreachable: {target} needs n > {max_n} (power at that n = {power_at_max:.4})")]
    UnreachablePower {
        target: f64,
        max_n: u64,
        power_at_max: f64,
    },

    #[error("cohort is empty")]
    EmptyCohort,

    #[error("all events in one analysis must use the same counting mode")]
    MixedEventModes,

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
