//! Robust approximate block designs for correlated discrete responses.

pub mod cli;
pub mod copula;
pub mod criteria;
pub mod equivalence;
pub mod error;
pub mod information;
pub mod margins;
pub mod optimizer;
pub mod validation;

pub use copula::{CopulaFamily, CopulaSpec};
pub use criteria::{CriterionSpec, Design, PriorSpec, Problem};
pub use error::{Error, Result};
pub use information::{Block, CopulaModel, FimEstimator, InfoMatrix, ParameterPoint};
pub use margins::{BasisTerm, Link, MarginalModel, Response, TreatmentPoint};
pub use optimizer::{CandidateSet, OptimizerOptions, StepRule};
