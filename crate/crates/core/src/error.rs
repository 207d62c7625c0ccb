use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or argument lies outside the domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Mismatched vector lengths or other misuse of an API.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("factorization failed: {0}")]
    Factorization(String),

    /// Newton iteration stopped without reaching the tolerance.
    #[error(
        "solver did not converge after {iterations} iterations (residual {residual:e}): {context}"
    )]
    NotConverged {
        context: String,
        iterations: usize,
        residual: f64,
    },

    /// Newton matrix could not be inverted at the current iterate.
    #[error("singular Newton system: {0}")]
    SingularStep(String),

    #[error("degenerate simplex: {0}")]
    Degenerate(String),

    #[error("subproblem on simplex {simplex} failed: {source}")]
    Subproblem {
        simplex: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
