use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("integrand is not finite at atom {atom}")]
    Integration { atom: usize },

    #[error("function value is not finite at atom {atom}")]
    Evaluation { atom: usize },

    #[error("coefficient check failed: {0}")]
    Coefficients(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("non-finite state on path {path} at step {step}")]
    Simulation { path: usize, step: usize },

    #[error("regression failed: {0}")]
    Regression(String),

    #[error("driver returned a non-finite value for component {component} at step {step}")]
    Driver { component: usize, step: usize },

    #[error("fixed-point iteration did not converge after {iterations} iterations (last delta {last_delta:e})")]
    NotConverged {
        iterations: usize,
        last_delta: f64,
        diagnostics: Box<crate::picard::PicardDiagnostics>,
    },

    #[error("terminal condition incompatible with obstacle at x = {x:?}: g = {terminal}, obstacle = {obstacle}")]
    Compatibility {
        x: Vec<f64>,
        terminal: f64,
        obstacle: f64,
    },

    #[error("a priori bound failed: right-hand side is zero but left-hand side is {lhs:e}")]
    BoundFailure { lhs: f64 },

    #[error("unstable explicit step: {0}")]
    Stability(String),

    #[error("{0}")]
    Config(String),

    #[error("unknown problem `{0}`")]
    UnknownProblem(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
