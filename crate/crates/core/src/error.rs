use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum ModelError {
    #[error("derivative order {requested} exceeds the supported maximum {max}")]
    UnsupportedOrder { requested: usize, max: usize },
    #[error("risk aversion {value} at x = {x} lies outside [1/c, c] with c = {c}")]
    InvalidRiskAversion { x: f64, value: f64, c: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("numeric failure: {0}")]
    NumericFailure(String),
    #[error("weights are degenerate: max/min ratio {ratio:e} exceeds {limit:e}")]
    DegenerateWeights { ratio: f64, limit: f64 },
    #[error("payoff `{0}` does not provide a derivative")]
    UnsupportedPayoff(String),
    #[error("quadrature produced a non-finite value at t = {t}, z = {z}: {detail}")]
    Range { t: f64, z: f64, detail: String },
    #[error("conjugate system infeasible after {iterations} iterations (residual {residual:e})")]
    ConjugateInfeasible { iterations: usize, residual: f64 },
}

pub type Result<T> = std::result::Result<T, ModelError>;
