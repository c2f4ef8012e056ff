//! Built-in base estimators of the heterogeneous treatment effect.
//!
//! Each fit produces pointwise estimates and standard errors at the training
//! points (an [`AgentPosterior`]) and can evaluate both at arbitrary encoded
//! covariate points, which is what out-of-sample synthesis needs. External
//! estimators enter through the plug-in CSV format instead; anything that
//! can produce `(tau_hat, se)` columns is interchangeable with these.

mod additive;
mod knn;
mod linear;
mod propensity;

pub use additive::{fit_additive_agent, FittedAdditiveAgent};
pub use knn::{default_k, fit_knn_agent, FittedKnnAgent};
pub use linear::{fit_linear_agent, FittedLinearAgent};
pub use propensity::{estimate_propensity, PropensityModel};

use crate::data::AgentPosterior;

/// Pointwise standard errors below this are lifted to it so produced agents
/// always satisfy the positive-se invariant, even on noiseless data.
pub(crate) const AGENT_SE_FLOOR: f64 = 1e-6;

/// A fitted base estimator, usable at training points and new points alike.
pub trait FittedAgent: Send + Sync {
    /// Estimate and standard error at one encoded covariate row.
    fn tau_se_at(&self, x: &[f64]) -> (f64, f64);

    /// Cached estimates at the training points.
    fn train_tau(&self) -> &[f64];

    /// Cached standard errors at the training points.
    fn train_se(&self) -> &[f64];

    /// Training-point posterior labeled with estimator index `j`.
    fn posterior(&self, j: usize) -> AgentPosterior {
        AgentPosterior::new(j, self.train_tau().to_vec(), self.train_se().to_vec())
    }
}
