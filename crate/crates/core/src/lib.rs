//! Approximate Bayesian inference for input-output factorial hidden Markov
//! models: binary chains driven by exogenous inputs and emitting Gaussian
//! observations through a sparse weight matrix.
//!
//! The posterior is approximated by a factored free-form variational scheme:
//! structured (path-factorized) mean field over the chains, expectation
//! propagation over the emission weights and (for the `sig` family) the
//! input weights, point estimation for the continuous-time weight families,
//! and a conjugate gamma update for the noise precision. A simulation and
//! ROC-recovery benchmark reproduces the calibration protocol end to end.

pub mod chains;
pub mod emission;
pub mod ep;
pub mod error;
pub mod inference;
pub mod model;
pub mod numeric;
// pub mod simbench;
pub mod transitions;
pub mod weights;

pub use error::{Error, Result};
pub use model::{
    emission_mean, joint_log_density, CPrior, Dataset, GammaPrior, GaussianPrior,
    Hyperparameters, ModelSpec, SparseRowMatrix, StateMatrix, WPrior,
};
pub use transitions::{ChainWeights, RatePair, TransitionFamily};
