//! Gibbs sampler for the synthesis model.
//!
//! One sweep updates, in fixed order: the varying coefficients `beta`
//! jointly per point, the prognostic values `mu`, the latent factors `f`,
//! the field variances `tau2`, the range parameters `phi` (one reflected
//! random-walk Metropolis step each), and the observation noise `sigma2`.
//! Conditioning coefficients for the current range parameters are cached per
//! field and rebuilt only when a proposal is evaluated or accepted.

mod geweke;
mod steps;

pub use geweke::{default_geweke_priors, geweke_test, GewekeReport};

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::agents::estimate_propensity;
use crate::data::{
    validate_dataset, AgentPosterior, Hyperparams, LatentState, ObservedData, PosteriorDraws,
    Priors, SamplerSettings,
};
use crate::error::{Error, Result};
use crate::nngp::{CoeffSet, NngpGraph};
use crate::rngutil;

/// Optional corruption of a Gibbs step, used by the Geweke self-test to
/// demonstrate that the test detects a broken sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplerMutation {
    #[default]
    None,
    /// Halve the scale of the sigma2 inverse-gamma draw.
    Sigma2ScaleHalved,
}

/// Immutable view of one sampling problem.
pub(crate) struct Model<'a> {
    pub y: &'a [f64],
    pub t: &'a [u8],
    /// Per agent j: tau_hat (prior means a_ji) and se (b_ji = se^2).
    pub agents: &'a [AgentPosterior],
    pub priors: &'a Priors,
    pub graph_x: &'a NngpGraph,
    pub graph_z: &'a NngpGraph,
}

impl Model<'_> {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }
}

/// Latent fields in column layout: `beta[j][i]`, `f[j][i]`.
#[derive(Debug, Clone)]
pub(crate) struct LatentVecs {
    pub mu: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub f: Vec<Vec<f64>>,
}

impl LatentVecs {
    pub fn to_latent_state(&self) -> LatentState {
        let n = self.mu.len();
        let jp1 = self.beta.len();
        let j = self.f.len();
        LatentState {
            mu: self.mu.clone(),
            beta: DMatrix::from_fn(n, jp1, |i, k| self.beta[k][i]),
            f: DMatrix::from_fn(n, j, |i, k| self.f[k][i]),
        }
    }

    /// `tau_i = beta_0(x_i) + sum_j beta_j(x_i) f_j(x_i)`.
    pub fn tau(&self, i: usize) -> f64 {
        let mut v = self.beta[0][i];
        for (j, fj) in self.f.iter().enumerate() {
            v += self.beta[j + 1][i] * fj[i];
        }
        v
    }
}

/// Mutable sampler state: latent fields, hyperparameters, and the cached
/// conditioning coefficients for the current range parameters.
pub(crate) struct ChainState {
    pub latent: LatentVecs,
    pub hyper: Hyperparams,
    pub coeffs_mu: CoeffSet,
    pub coeffs_beta: Vec<CoeffSet>,
}

/// Per-sweep acceptance flags for the range-parameter Metropolis updates.
pub(crate) struct SweepStats {
    pub accept_mu: bool,
    pub accept_beta: Vec<bool>,
}

/// Chain-level diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub phi_accept_rate_mu: f64,
    pub phi_accept_rate_beta: Vec<f64>,
    /// Effective sample size of each monitored scalar over retained draws.
    pub ess: BTreeMap<String, f64>,
    /// Log joint density after every sweep.
    pub log_joint: Vec<f64>,
}

/// Everything a caller needs after a run: the retained draws, diagnostics,
/// and the resolved priors / propensities actually used.
#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub draws: PosteriorDraws,
    pub diagnostics: ChainDiagnostics,
    pub priors: Priors,
    pub settings: SamplerSettings,
    /// Propensity scores used in the prognostic input space.
    pub pi: Vec<f64>,
}

/// Runs the Gibbs sampler. If `priors` is `None`, defaults are resolved from
/// the data; if `data.pi` is absent, propensities are estimated first. Fully
/// deterministic given `settings.seed`.
pub fn run_chain(
    data: &ObservedData,
    agents: &[AgentPosterior],
    priors: Option<Priors>,
    settings: &SamplerSettings,
) -> Result<ChainOutput> {
    settings.validate()?;
    validate_dataset(data, agents)?;
    if agents.is_empty() {
        return Err(Error::validation(vec![
            "synthesis requires at least one agent".to_string(),
        ]));
    }
    let n = data.n();

    // Propensity: supplied values are clipped and passed through, otherwise
    // estimated by logistic regression.
    let pi: Vec<f64> = match &data.pi {
        Some(p) => p.iter().map(|&v| v.clamp(0.01, 0.99)).collect(),
        None => estimate_propensity(data)?.1,
    };
    let z = {
        let mut z = DMatrix::zeros(n, data.p() + 1);
        z.view_mut((0, 0), (n, data.p())).copy_from(&data.x);
        for i in 0..n {
            z[(i, data.p())] = pi[i];
        }
        z
    };

    let priors = match priors {
        Some(p) => p,
        None => Priors::default_for(data, &z, agents.len()),
    };
    priors.validate()?;
    if priors.bar_beta.len() != agents.len() + 1 {
        return Err(Error::validation(vec![format!(
            "priors sized for {} agents but {} were supplied",
            priors.bar_beta.len() - 1,
            agents.len()
        )]));
    }

    let graph_x = NngpGraph::build(data.x.clone(), settings.m)?;
    let graph_z = NngpGraph::build(z, settings.m)?;
    let model = Model {
        y: &data.y,
        t: &data.t,
        agents,
        priors: &priors,
        graph_x: &graph_x,
        graph_z: &graph_z,
    };

    let mut rng = rngutil::root(settings.seed);
    let mut state = init_state(&model)?;

    let n_retained = settings.n_retained();
    let mut states = Vec::with_capacity(n_retained);
    let mut tau_rows: Vec<Vec<f64>> = Vec::with_capacity(n_retained);
    let mut log_joint = Vec::with_capacity(settings.n_iter);
    let mut accept_mu = 0usize;
    let mut accept_beta = vec![0usize; agents.len() + 1];

    let sd_mu = phi_step_sd(settings, priors.phi_bounds_mu);
    let sd_beta = phi_step_sd(settings, priors.phi_bounds_beta);

    for iter in 0..settings.n_iter {
        let stats = steps::sweep(&model, &mut state, sd_mu, sd_beta, SamplerMutation::None, &mut rng)
            .map_err(|e| Error::Sampler {
                iter,
                step: e.0,
                detail: e.1,
            })?;
        accept_mu += stats.accept_mu as usize;
        for (j, &a) in stats.accept_beta.iter().enumerate() {
            accept_beta[j] += a as usize;
        }
        log_joint.push(log_joint_density(&model, &state));

        if iter >= settings.n_burn && (iter - settings.n_burn).is_multiple_of(settings.thin) {
            tau_rows.push((0..n).map(|i| state.latent.tau(i)).collect());
            states.push((state.latent.to_latent_state(), state.hyper.clone()));
        }
    }

    let draws_n = states.len();
    let tau = DMatrix::from_fn(draws_n, n, |d, i| tau_rows[d][i]);
    let draws = PosteriorDraws { states, tau };

    let mut ess = BTreeMap::new();
    let pull = |f: &dyn Fn(&(LatentState, Hyperparams)) -> f64| -> Vec<f64> {
        draws.states.iter().map(f).collect()
    };
    ess.insert("sigma2".to_string(), ess_of(&pull(&|s| s.1.sigma2)));
    ess.insert("tau2_mu".to_string(), ess_of(&pull(&|s| s.1.tau2_mu)));
    for j in 0..=agents.len() {
        ess.insert(format!("tau2_beta_{j}"), ess_of(&pull(&|s| s.1.tau2_beta[j])));
        ess.insert(format!("phi_beta_{j}"), ess_of(&pull(&|s| s.1.phi_beta[j])));
    }
    ess.insert("phi_mu".to_string(), ess_of(&pull(&|s| s.1.phi_mu)));
    let mean_tau: Vec<f64> = (0..draws_n)
        .map(|d| draws.tau.row(d).sum() / n as f64)
        .collect();
    ess.insert("mean_tau".to_string(), ess_of(&mean_tau));

    let diagnostics = ChainDiagnostics {
        phi_accept_rate_mu: accept_mu as f64 / settings.n_iter as f64,
        phi_accept_rate_beta: accept_beta
            .iter()
            .map(|&a| a as f64 / settings.n_iter as f64)
            .collect(),
        ess,
        log_joint,
    };

    Ok(ChainOutput {
        draws,
        diagnostics,
        priors,
        settings: settings.clone(),
        pi,
    })
}

/// Metropolis step size: explicit setting, or a tenth of the bound span.
fn phi_step_sd(settings: &SamplerSettings, bounds: (f64, f64)) -> f64 {
    settings
        .phi_proposal_sd
        .unwrap_or(0.1 * (bounds.1 - bounds.0))
}

/// Initial state: prognostic values at the control-arm outcome mean,
/// coefficients at their prior means, factors at the agent means, variances
/// at prior means, ranges at bound midpoints.
pub(crate) fn init_state(model: &Model) -> Result<ChainState> {
    let n = model.n();
    let j = model.n_agents();
    let priors = model.priors;

    let control_mean = {
        let (mut s, mut c) = (0.0, 0usize);
        for i in 0..n {
            if model.t[i] == 0 {
                s += model.y[i];
                c += 1;
            }
        }
        if c > 0 {
            s / c as f64
        } else {
            priors.bar_mu
        }
    };

    let latent = LatentVecs {
        mu: vec![control_mean; n],
        beta: priors.bar_beta.iter().map(|&b| vec![b; n]).collect(),
        f: (0..j).map(|k| model.agents[k].tau_hat.clone()).collect(),
    };
    let hyper = Hyperparams {
        sigma2: priors.ig_sigma.init_value(),
        tau2_mu: priors.ig_mu.init_value(),
        tau2_beta: priors.ig_beta.iter().map(|p| p.init_value()).collect(),
        phi_mu: 0.5 * (priors.phi_bounds_mu.0 + priors.phi_bounds_mu.1),
        phi_beta: vec![0.5 * (priors.phi_bounds_beta.0 + priors.phi_bounds_beta.1); j + 1],
    };
    let coeffs_mu = CoeffSet::build(model.graph_z, hyper.phi_mu)?;
    let coeffs_beta = hyper
        .phi_beta
        .iter()
        .map(|&phi| CoeffSet::build(model.graph_x, phi))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChainState {
        latent,
        hyper,
        coeffs_mu,
        coeffs_beta,
    })
}

/// Joint log density of data, latent fields, and hyperparameters; the
/// uniform range priors contribute only a constant and are omitted.
pub(crate) fn log_joint_density(model: &Model, state: &ChainState) -> f64 {
    const LN_2PI: f64 = 1.8378770664093453;
    let n = model.n();
    let latent = &state.latent;
    let hyper = &state.hyper;
    let mut lp = 0.0;

    for i in 0..n {
        let mean = latent.mu[i]
            + if model.t[i] == 1 { latent.tau(i) } else { 0.0 };
        let r = model.y[i] - mean;
        lp += -0.5 * (LN_2PI + hyper.sigma2.ln() + r * r / hyper.sigma2);
    }
    lp += state
        .coeffs_mu
        .log_density(model.graph_z, &latent.mu, model.priors.bar_mu, hyper.tau2_mu);
    for (jj, coeffs) in state.coeffs_beta.iter().enumerate() {
        lp += coeffs.log_density(
            model.graph_x,
            &latent.beta[jj],
            model.priors.bar_beta[jj],
            hyper.tau2_beta[jj],
        );
    }
    for (k, agent) in model.agents.iter().enumerate() {
        for i in 0..n {
            let b = agent.se[i] * agent.se[i];
            let r = latent.f[k][i] - agent.tau_hat[i];
            lp += -0.5 * (LN_2PI + b.ln() + r * r / b);
        }
    }
    lp += inv_gamma_logpdf(hyper.sigma2, model.priors.ig_sigma.delta / 2.0, model.priors.ig_sigma.eta / 2.0);
    lp += inv_gamma_logpdf(hyper.tau2_mu, model.priors.ig_mu.delta / 2.0, model.priors.ig_mu.eta / 2.0);
    for (jj, p) in model.priors.ig_beta.iter().enumerate() {
        lp += inv_gamma_logpdf(hyper.tau2_beta[jj], p.delta / 2.0, p.eta / 2.0);
    }
    lp
}

/// log of the IG(shape, scale) density.
pub(crate) fn inv_gamma_logpdf(x: f64, shape: f64, scale: f64) -> f64 {
    shape * scale.ln() - crate::oracle::lgamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// Draws from IG(shape, scale) by inverting a gamma draw.
pub(crate) fn inv_gamma_draw(shape: f64, scale: f64, rng: &mut ChaCha8Rng) -> f64 {
    let g = Gamma::new(shape, 1.0 / scale)
        .expect("inverse-gamma parameters positive")
        .sample(rng);
    1.0 / g
}

/// Effective sample size from the initial-positive-sequence estimator on
/// paired autocorrelations.
pub fn ess_of(series: &[f64]) -> f64 {
    let s = series.len();
    if s < 4 {
        return s as f64;
    }
    let mean = series.iter().sum::<f64>() / s as f64;
    let var = series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / s as f64;
    if var <= 0.0 {
        return s as f64;
    }
    let max_lag = (s - 1).min(1000);
    let rho = |lag: usize| -> f64 {
        let mut acc = 0.0;
        for i in 0..(s - lag) {
            acc += (series[i] - mean) * (series[i + lag] - mean);
        }
        acc / (s as f64 * var)
    };
    let mut iact = 1.0;
    let mut lag = 1;
    while lag < max_lag {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        iact += 2.0 * pair;
        lag += 2;
    }
    (s as f64 / iact).min(s as f64)
}

/// Draws `n_draws` times from the observation-noise full conditional on a
/// fixed residual vector; the residuals do not depend on the noise, so the
/// draws are i.i.d. from IG(delta/2 + n/2, eta/2 + sum(r^2)/2). Runs the same
/// code path as the in-chain step. Used by the self-check suite.
pub fn sigma2_conditional_draws(
    delta: f64,
    eta: f64,
    residuals: &[f64],
    n_draws: usize,
    seed: u64,
) -> Vec<f64> {
    let mut rng = rngutil::root(seed);
    let sum_sq: f64 = residuals.iter().map(|r| r * r).sum();
    (0..n_draws)
        .map(|_| steps::draw_sigma2(delta, eta, sum_sq, residuals.len(), SamplerMutation::None, &mut rng))
        .collect()
}

/// Same as [`sigma2_conditional_draws`] for a field-variance full
/// conditional with fixed field residual quadratic form.
pub fn tau2_conditional_draws(
    delta: f64,
    eta: f64,
    quadform: f64,
    n: usize,
    n_draws: usize,
    seed: u64,
) -> Vec<f64> {
    let mut rng = rngutil::root(seed);
    (0..n_draws)
        .map(|_| steps::draw_tau2(delta, eta, quadform, n, &mut rng))
        .collect()
}

#[cfg(test)]
mod tests;
