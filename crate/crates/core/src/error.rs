use thiserror::Error;

/// Errors raised by the design engine.
///
/// Every variant maps to a stable module-qualified code (see [`Error::code`])
/// that the CLI and the C API surface verbatim.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("outcome excluded: joint pmf {pmf:e} underflows at {outcome:?}")]
    ExcludedOutcome { outcome: Vec<u64>, pmf: f64 },

    #[error("outcome grid has {cells} cells, above the exact-sum limit {limit}; use the Monte-Carlo estimator")]
    GridTooLarge { cells: usize, limit: usize },

    #[error("information matrix is singular at quadrature node {node} (relative pivot {pivot:e})")]
    Singular { node: usize, pivot: f64 },

    #[error("no seed design with a nonsingular information matrix could be built from {candidates} candidates")]
    Infeasible { candidates: usize },

    #[error("truncation mass deficit {deficit:e} exceeds tail tolerance {tail_tol:e}")]
    TruncationDeficit { deficit: f64, tail_tol: f64 },

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Module-qualified error code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Domain(_) => "copula.domain",
            Error::Config(_) => "cli.config",
            Error::ExcludedOutcome { .. } => "information.excluded_outcome",
            Error::GridTooLarge { .. } => "information.grid_too_large",
            Error::Singular { .. } => "criteria.singular",
            Error::Infeasible { .. } => "optimizer.infeasible",
            Error::TruncationDeficit { .. } => "validation.truncation_deficit",
            Error::Io(_) => "cli.io",
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
