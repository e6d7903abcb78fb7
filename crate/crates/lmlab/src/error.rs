use thiserror::Error;

/// Errors surfaced by the library. Solver warnings (stalls, unreachable
/// targets, vacuous coefficients) are carried as flags on result structs
/// instead; only contract violations become `Error`s.
#[derive(Error, Debug)]
pub enum Error {
    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:.3e}, lambda_max {lambda_max:.3e})")]
    NotPsd { min_eig: f64, lambda_max: f64 },

    #[error("degenerate span: input rows are not full rank")]
    DegenerateSpan,

    #[error("{0} is not a probability vector")]
    NotStochastic(&'static str),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("margin filter removed every context; task is empty")]
    EmptyTask,

    #[error("training diverged: loss {loss:.6e} exceeded 10x initial {initial:.6e}")]
    Divergence { loss: f64, initial: f64 },

    #[error("all theta samples are identical; regression is singular")]
    SingularRegression,

    #[error("feature columns are identical; residual ratio undefined")]
    DegenerateFeatures,

    #[error("decomposition factor undefined: error covariance quadratic form is zero")]
    UndefinedFactor,

    #[error("sweep needs at least 5 points with distinct cross-entropy values")]
    DegenerateSweep,

    #[error("invalid config at {path}: {msg}")]
    Config { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
