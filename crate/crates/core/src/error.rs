use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid cost weights: {0}")]
    InvalidWeights(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("smooth step requires a < b (got a = {a}, b = {b})")]
    InvalidStep { a: f64, b: f64 },

    #[error("stationary solver did not converge after {iterations} iterations (residual {residual:e})")]
    SolverFailure { residual: f64, iterations: usize },

    #[error(
        "bracket is not unimodal: f({:.4}) = {:.6e}, f({:.4}) = {:.6e}, f({:.4}) = {:.6e}",
        .triple[0].0, .triple[0].1, .triple[1].0, .triple[1].1, .triple[2].0, .triple[2].1
    )]
    NotUnimodal { triple: [(f64, f64); 3] },

    #[error("invalid bracket [{lo}, {hi}]")]
    InvalidBracket { lo: f64, hi: f64 },

    #[error("iterate became non-finite at episode {episode} (theta = {theta})")]
    Diverged { episode: u64, theta: f64 },

    #[error("empty theta grid")]
    EmptyGrid,
}
