//! Full-conditional updates, one function per Gibbs step.
//!
//! The varying-coefficient and prognostic conditionals combine the Gaussian
//! likelihood with the factorized GP prior. A point's prior precision and
//! linear term collect its own conditional plus one term per child (every
//! point whose neighbor set contains it); the likelihood contributes only
//! for treated units. All conditionals act on centered fields and the prior
//! mean is added back on assignment; the likelihood residual is centered the
//! same way, which is what makes the joint self-consistent (and is what the
//! Geweke test checks).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{inv_gamma_draw, ChainState, Model, SamplerMutation, SweepStats};
use crate::nngp::{cholesky_in_place, cholesky_solve_in_place, precision_sample_in_place, CoeffSet, NngpGraph};

pub(crate) type StepResult<T> = std::result::Result<T, (&'static str, String)>;

/// One systematic-scan sweep in the fixed order: beta, mu, f, tau2_beta,
/// tau2_mu, phi, sigma2.
pub(crate) fn sweep(
    model: &Model,
    state: &mut ChainState,
    phi_sd_mu: f64,
    phi_sd_beta: f64,
    mutation: SamplerMutation,
    rng: &mut ChaCha8Rng,
) -> StepResult<SweepStats> {
    step_beta(model, state, rng)?;
    step_mu(model, state, rng);
    step_f(model, state, rng);
    step_tau2_beta(model, state, rng);
    step_tau2_mu(model, state, rng);
    let mut accept_beta = Vec::with_capacity(model.n_agents() + 1);
    for j in 0..=model.n_agents() {
        let accepted = phi_mh_step(
            model.graph_x,
            &mut state.coeffs_beta[j],
            &mut state.hyper.phi_beta[j],
            &state.latent.beta[j],
            model.priors.bar_beta[j],
            state.hyper.tau2_beta[j],
            model.priors.phi_bounds_beta,
            phi_sd_beta,
            rng,
        )?;
        accept_beta.push(accepted);
    }
    let accept_mu = phi_mh_step(
        model.graph_z,
        &mut state.coeffs_mu,
        &mut state.hyper.phi_mu,
        &state.latent.mu,
        model.priors.bar_mu,
        state.hyper.tau2_mu,
        model.priors.phi_bounds_mu,
        phi_sd_mu,
        rng,
    )?;
    step_sigma2(model, state, mutation, rng);
    Ok(SweepStats {
        accept_mu,
        accept_beta,
    })
}

/// Prior precision and linear coefficient of the centered field value at
/// point `i`: its own conditional term plus one term per child.
fn prior_terms(
    graph: &NngpGraph,
    coeffs: &CoeffSet,
    values: &[f64],
    mean: f64,
    tau2: f64,
    i: usize,
) -> (f64, f64) {
    let own = &coeffs.coeffs[i];
    let denom_own = tau2 * own.f;
    let mut dot = 0.0;
    for (k, &nb) in graph.neighbors[i].iter().enumerate() {
        dot += own.b[k] * (values[nb] - mean);
    }
    let mut gamma = 1.0 / denom_own;
    let mut lin = dot / denom_own;
    for &(t, pos) in &graph.children[i] {
        let ct = &coeffs.coeffs[t];
        let denom = tau2 * ct.f;
        let coef = ct.b[pos];
        let mut resid = values[t] - mean;
        for (q, &nb) in graph.neighbors[t].iter().enumerate() {
            if q != pos {
                resid -= ct.b[q] * (values[nb] - mean);
            }
        }
        gamma += coef * coef / denom;
        lin += coef * resid / denom;
    }
    (gamma, lin)
}

/// Precision matrix (row-major) and linear term of the joint full
/// conditional of the centered coefficient vector at point `i`.
pub(crate) fn beta_full_conditional(
    model: &Model,
    state: &ChainState,
    i: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dim = model.n_agents() + 1;
    let mut a = vec![0.0; dim * dim];
    let mut btilde = vec![0.0; dim];
    for j in 0..dim {
        let (gamma, lin) = prior_terms(
            model.graph_x,
            &state.coeffs_beta[j],
            &state.latent.beta[j],
            model.priors.bar_beta[j],
            state.hyper.tau2_beta[j],
            i,
        );
        a[j * dim + j] = gamma;
        btilde[j] = lin;
    }
    if model.t[i] == 1 {
        let sigma2 = state.hyper.sigma2;
        let mut fvec = vec![1.0; dim];
        for k in 0..model.n_agents() {
            fvec[k + 1] = state.latent.f[k][i];
        }
        let mut resid = model.y[i] - state.latent.mu[i];
        for (f, bar) in fvec.iter().zip(&model.priors.bar_beta) {
            resid -= f * bar;
        }
        for r in 0..dim {
            for c in 0..dim {
                a[r * dim + c] += fvec[r] * fvec[c] / sigma2;
            }
            btilde[r] += fvec[r] * resid / sigma2;
        }
    }
    (a, btilde)
}

/// Draws the `(J+1)`-coefficient vector at point `i` from its joint normal
/// full conditional and writes it into the state.
pub(crate) fn draw_beta_point(
    model: &Model,
    state: &mut ChainState,
    i: usize,
    rng: &mut ChaCha8Rng,
) -> StepResult<()> {
    let dim = model.n_agents() + 1;
    let (mut a, mut btilde) = beta_full_conditional(model, state, i);
    cholesky_in_place(&mut a, dim).map_err(|col| {
        (
            "beta",
            format!("full-conditional precision at point {i} not positive definite (pivot {col})"),
        )
    })?;
    cholesky_solve_in_place(&a, dim, &mut btilde);
    let mut z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    precision_sample_in_place(&a, dim, &mut z);
    for j in 0..dim {
        state.latent.beta[j][i] = model.priors.bar_beta[j] + btilde[j] + z[j];
    }
    Ok(())
}

pub(crate) fn step_beta(model: &Model, state: &mut ChainState, rng: &mut ChaCha8Rng) -> StepResult<()> {
    for i in 0..model.n() {
        draw_beta_point(model, state, i, rng)?;
    }
    Ok(())
}

/// Outcome with the treatment block removed: `y_i - T_i tau_i`.
pub(crate) fn y_tilde(model: &Model, state: &ChainState, i: usize) -> f64 {
    if model.t[i] == 1 {
        model.y[i] - state.latent.tau(i)
    } else {
        model.y[i]
    }
}

/// Mean and variance of the prognostic full conditional at point `i`.
pub(crate) fn mu_full_conditional(model: &Model, state: &ChainState, i: usize) -> (f64, f64) {
    let bar = model.priors.bar_mu;
    let (gamma, lin) = prior_terms(
        model.graph_z,
        &state.coeffs_mu,
        &state.latent.mu,
        bar,
        state.hyper.tau2_mu,
        i,
    );
    let prec = 1.0 / state.hyper.sigma2 + gamma;
    let lin = (y_tilde(model, state, i) - bar) / state.hyper.sigma2 + lin;
    (bar + lin / prec, 1.0 / prec)
}

pub(crate) fn step_mu(model: &Model, state: &mut ChainState, rng: &mut ChaCha8Rng) {
    for i in 0..model.n() {
        let (mean, var) = mu_full_conditional(model, state, i);
        let z: f64 = rng.sample(StandardNormal);
        state.latent.mu[i] = mean + var.sqrt() * z;
    }
}

/// Mean and variance of the latent-factor full conditional for `(i, j)`.
/// Untreated units never enter the likelihood, so their factors are drawn
/// from the agent prior; that keeps a treatment-effect draw defined at every
/// point.
pub(crate) fn f_full_conditional(model: &Model, state: &ChainState, i: usize, j: usize) -> (f64, f64) {
    let a_ji = model.agents[j].tau_hat[i];
    let b_ji = model.agents[j].se[i] * model.agents[j].se[i];
    if model.t[i] == 0 {
        return (a_ji, b_ji);
    }
    let bj = state.latent.beta[j + 1][i];
    let mut others = state.latent.beta[0][i];
    for k in 0..model.n_agents() {
        if k != j {
            others += state.latent.beta[k + 1][i] * state.latent.f[k][i];
        }
    }
    let r = model.y[i] - state.latent.mu[i] - others;
    let prec = bj * bj / state.hyper.sigma2 + 1.0 / b_ji;
    let lin = bj * r / state.hyper.sigma2 + a_ji / b_ji;
    (lin / prec, 1.0 / prec)
}

pub(crate) fn step_f(model: &Model, state: &mut ChainState, rng: &mut ChaCha8Rng) {
    for i in 0..model.n() {
        for j in 0..model.n_agents() {
            let (mean, var) = f_full_conditional(model, state, i, j);
            let z: f64 = rng.sample(StandardNormal);
            state.latent.f[j][i] = mean + var.sqrt() * z;
        }
    }
}

/// Shape and scale of the variance full conditional for coefficient field `j`.
#[cfg(test)]
pub(crate) fn tau2_beta_params(model: &Model, state: &ChainState, j: usize) -> (f64, f64) {
    let quad = state.coeffs_beta[j].residual_quadform(
        model.graph_x,
        &state.latent.beta[j],
        model.priors.bar_beta[j],
    );
    let p = model.priors.ig_beta[j];
    ((p.delta + model.n() as f64) / 2.0, (p.eta + quad) / 2.0)
}

pub(crate) fn draw_tau2(delta: f64, eta: f64, quadform: f64, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    inv_gamma_draw((delta + n as f64) / 2.0, (eta + quadform) / 2.0, rng)
}

pub(crate) fn step_tau2_beta(model: &Model, state: &mut ChainState, rng: &mut ChaCha8Rng) {
    for j in 0..=model.n_agents() {
        let quad = state.coeffs_beta[j].residual_quadform(
            model.graph_x,
            &state.latent.beta[j],
            model.priors.bar_beta[j],
        );
        let p = model.priors.ig_beta[j];
        state.hyper.tau2_beta[j] = draw_tau2(p.delta, p.eta, quad, model.n(), rng);
    }
}

#[cfg(test)]
pub(crate) fn tau2_mu_params(model: &Model, state: &ChainState) -> (f64, f64) {
    let quad = state
        .coeffs_mu
        .residual_quadform(model.graph_z, &state.latent.mu, model.priors.bar_mu);
    let p = model.priors.ig_mu;
    ((p.delta + model.n() as f64) / 2.0, (p.eta + quad) / 2.0)
}

pub(crate) fn step_tau2_mu(model: &Model, state: &mut ChainState, rng: &mut ChaCha8Rng) {
    let quad = state
        .coeffs_mu
        .residual_quadform(model.graph_z, &state.latent.mu, model.priors.bar_mu);
    let p = model.priors.ig_mu;
    state.hyper.tau2_mu = draw_tau2(p.delta, p.eta, quad, model.n(), rng);
}

/// Folds a proposal into the open interval by reflection at the bounds;
/// reflection keeps the random walk symmetric, so no proposal correction is
/// needed under the uniform prior.
pub(crate) fn reflect_into(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    let mut t = (x - lo) % (2.0 * span);
    if t < 0.0 {
        t += 2.0 * span;
    }
    if t > span {
        t = 2.0 * span - t;
    }
    let eps = 1e-12 * span;
    (lo + t).clamp(lo + eps, hi - eps)
}

/// One reflected random-walk Metropolis update of a range parameter. The
/// target is the factorized GP log density of the current field at the
/// proposed range; conditioning coefficients are rebuilt for the proposal
/// only and swapped in on acceptance.
#[allow(clippy::too_many_arguments)]
pub(crate) fn phi_mh_step(
    graph: &NngpGraph,
    coeffs: &mut CoeffSet,
    phi: &mut f64,
    values: &[f64],
    mean: f64,
    tau2: f64,
    bounds: (f64, f64),
    sd: f64,
    rng: &mut ChaCha8Rng,
) -> StepResult<bool> {
    let z: f64 = rng.sample(StandardNormal);
    let prop = reflect_into(*phi + sd * z, bounds.0, bounds.1);
    debug_assert!(prop > bounds.0 && prop < bounds.1);
    let prop_coeffs = CoeffSet::build(graph, prop)
        .map_err(|e| ("phi", format!("proposal coefficients at phi={prop}: {e}")))?;
    let log_ratio = prop_coeffs.log_density(graph, values, mean, tau2)
        - coeffs.log_density(graph, values, mean, tau2);
    let u: f64 = rng.gen();
    if u.ln() < log_ratio {
        *phi = prop;
        *coeffs = prop_coeffs;
        Ok(true)
    } else {
        Ok(false)
    }
}

pub(crate) fn draw_sigma2(
    delta: f64,
    eta: f64,
    sum_sq: f64,
    n: usize,
    mutation: SamplerMutation,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let shape = delta / 2.0 + n as f64 / 2.0;
    let mut scale = eta / 2.0 + sum_sq / 2.0;
    if mutation == SamplerMutation::Sigma2ScaleHalved {
        scale *= 0.5;
    }
    inv_gamma_draw(shape, scale, rng)
}

pub(crate) fn step_sigma2(
    model: &Model,
    state: &mut ChainState,
    mutation: SamplerMutation,
    rng: &mut ChaCha8Rng,
) {
    let sum_sq: f64 = (0..model.n())
        .map(|i| {
            let r = y_tilde(model, state, i) - state.latent.mu[i];
            r * r
        })
        .sum();
    let p = model.priors.ig_sigma;
    state.hyper.sigma2 = draw_sigma2(p.delta, p.eta, sum_sq, model.n(), mutation, rng);
}
