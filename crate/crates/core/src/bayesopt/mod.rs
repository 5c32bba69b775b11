//! GP-UCB over curriculum parameters.

mod gp;
pub mod neldermead;
mod ucb;

use thiserror::Error;

pub use gp::{
    gp_posterior, kernel_rbf_ard, log_marginal_likelihood, log_posterior, map_fit, normalize_dataset, GPHyperparams,
    GPModel, GammaPrior, HyperPriors, MapFit, MapFitConfig, Normalization,
};
pub use ucb::{ucb_propose, Dim, ParamSpace, UCBConfig, LOCAL_SEARCH_RADIUS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BayesOptError {
    #[error("expected dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("kernel matrix is singular even with jitter")]
    SingularKernel,
    #[error("posterior variance {0} is negative beyond rounding")]
    NegativeVariance(f64),
    #[error("gamma prior needs positive mean and variance, got ({mean}, {variance})")]
    InvalidPrior { mean: f64, variance: f64 },
    #[error("hyperparameter fit needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("non-finite observation")]
    NonFinite,
    #[error("search space is empty")]
    EmptySpace,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
