use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("spectral radius did not converge after {iterations} iterations (bracket [{lower}, {upper}])")]
    NotConverged {
        iterations: usize,
        lower: f64,
        upper: f64,
    },

    #[error("matrix too large for dense eigenvalue fallback ({0}x{0})")]
    TooLarge(usize),

    #[error("mu = {mu} lies in the spectrum (nearest eigenvalue {eigenvalue})")]
    Singular { mu: f64, eigenvalue: f64 },

    #[error("Neumann series diverges: spectral radius {radius} >= 1")]
    Divergent { radius: f64 },

    #[error("characteristic gate: r(Gamma D_mu) = {radius} >= 1 at mu = {mu}")]
    Characteristic { mu: f64, radius: f64 },

    #[error("history covers [0, {available}] but [0, {requested}] was requested")]
    ShortHistory { available: f64, requested: f64 },

    #[error("positivity violated: {0}")]
    Positivity(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("scenario: {0}")]
    Scenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
