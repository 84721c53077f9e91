use thiserror::Error;

use crate::expression::ExprError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("integration diverged: non-finite state at node {node} (t = {t})")]
    IntegrationDiverged { node: usize, t: f64 },

    #[error("non-finite value in {what} at node {node}")]
    NonFinite { what: &'static str, node: usize },

    #[error("gramian singular: Cholesky failed after diagonal jitter {jitter:e}")]
    GramianSingular { jitter: f64 },

    #[error("fundamental matrix numerically singular at node {node}")]
    SingularFundamental { node: usize },

    #[error("expression error: {0}")]
    Expr(#[from] ExprError),

    #[error("evaluation failed at {point}: {source}")]
    Eval { point: String, source: ExprError },

    #[error("system build error: {0}")]
    Build(String),

    #[error("unsupported check: {0}")]
    Unsupported(String),

    #[error(
        "grid too coarse: no contraction window found above the minimum width {min_width:e} s; \
         densify the recorded output"
    )]
    GridTooCoarse { min_width: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}
