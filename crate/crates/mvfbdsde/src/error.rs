use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty measure")]
    EmptyMeasure,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unsupported method: {0}")]
    Unsupported(String),
    #[error("marginal mismatch: measured discrepancy {0:e}")]
    Marginal(f64),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("non-finite value in coefficient {name} at node {node}")]
    NonFinite { name: &'static str, node: usize },
    #[error("regression singular at node {0}")]
    Singular(usize),
    #[error("Picard divergence at alpha {alpha} after {iterations} iterations")]
    Divergence { alpha: f64, iterations: usize, residuals: Vec<f64> },
    #[error("continuation failed at alpha {alpha}: {source}")]
    Rung { alpha: f64, ladder: Vec<(f64, usize, bool)>, source: Box<Error> },
    #[error("shooting failed: {0}")]
    Shooting(String),
    #[error("A6 requires c≠0")]
    ZeroTerminalCoefficient,
    #[error("L-derivative unavailable")]
    LDerivativeUnavailable,
    #[error("control outside the admissible set at node {node}")]
    Inadmissible { node: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
