//! Bayesian causal synthesis of heterogeneous treatment effect estimators.
//!
//! Given a treatment/outcome dataset and `J` base estimates of the
//! heterogeneous treatment effect (each with pointwise standard errors),
//! this crate fits the synthesis model
//!
//! ```text
//! y_i = mu(x_i, pi_i) + T_i { beta_0(x_i) + sum_j beta_j(x_i) f_j(x_i) } + eps_i
//! ```
//!
//! by Gibbs sampling, where the latent factor `f_j` carries estimator `j`'s
//! approximate posterior and the varying coefficients `beta_j` and the
//! prognostic surface `mu` carry nearest-neighbor Gaussian process priors.
//! The posterior of the treatment effect at any point is
//! `tau(x) = beta_0(x) + sum_j beta_j(x) f_j(x)`.
//!
//! Modules:
//! - [`data`]: dataset, agent, prior, and sampler-setting types plus validation
//! - [`encode`]: covariate encoding (standardize / passthrough / one-hot)
//! - [`nngp`]: nearest-neighbor GP graph, conditioning coefficients, log density
//! - [`sampler`]: the Gibbs sampler, chain driver, and Geweke self-test
//! - [`agents`]: built-in base estimators (linear, additive, k-NN) and propensity
//! - [`predict`]: posterior treatment-effect inference at new covariate points
//! - [`simbench`]: synthetic scenario generators, metrics, replication runner
//! - [`io`]: CSV ingestion/emission and chain persistence
//! - [`oracle`]: dense linear-algebra reference routes used by the self-checks

pub mod agents;
pub mod data;
pub mod encode;
pub mod error;
pub mod io;
pub mod nngp;
pub mod oracle;
pub mod predict;
pub mod rngutil;
pub mod sampler;
pub mod simbench;

pub use error::{Error, Result};
