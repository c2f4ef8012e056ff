//! Posterior treatment-effect inference at new covariate points.
//!
//! For a new point the coefficient fields are extended by the GP
//! conditional: given a retained draw's field values, `beta_j(x0)` is normal
//! with mean `bar_j + b . (beta_j(N) - bar_j)` and variance `tau2_j F`,
//! where the conditioning set `N(x0)` is the `m` nearest training points
//! (unrestricted; prediction has no ordering to respect). Latent factors at
//! the new point come straight from the agent posteriors there, and the
//! treatment-effect draw combines them per the synthesis identity.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{PosteriorDraws, Priors};
use crate::error::{Error, Result};
use crate::nngp::NBR_JITTER;
use crate::oracle;

/// Per-draw coefficient samples at one prediction point: `draws x (J+1)`.
pub fn predict_beta_at(
    x0: &[f64],
    draws: &PosteriorDraws,
    priors: &Priors,
    x_train: &DMatrix<f64>,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DMatrix<f64>> {
    if x0.len() != x_train.ncols() {
        return Err(Error::Prediction(format!(
            "prediction point has {} coordinates, training space has {}",
            x0.len(),
            x_train.ncols()
        )));
    }
    let n = x_train.nrows();
    let n_fields = priors.bar_beta.len();
    let n_draws = draws.n_draws();

    // m nearest training points
    let mut dist: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let d: f64 = (0..x0.len())
                .map(|c| (x_train[(i, c)] - x0[c]).powi(2))
                .sum::<f64>()
                .sqrt();
            (d, i)
        })
        .collect();
    dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dist.truncate(m.min(n));
    let nbrs: Vec<usize> = dist.iter().map(|&(_, i)| i).collect();
    let d0: Vec<f64> = dist.iter().map(|&(d, _)| d).collect();
    let k = nbrs.len();
    let mut cross = vec![0.0; k * k];
    for a in 0..k {
        for b in (a + 1)..k {
            let d = (x_train.row(nbrs[a]) - x_train.row(nbrs[b])).norm();
            cross[a * k + b] = d;
            cross[b * k + a] = d;
        }
    }

    let mut out = DMatrix::zeros(n_draws, n_fields);
    for (d_idx, (state, hyper)) in draws.states.iter().enumerate() {
        for j in 0..n_fields {
            let phi = hyper.phi_beta[j];
            let (b, f) = oracle::schur_b_f(&d0, &cross, phi, NBR_JITTER);
            let bar = priors.bar_beta[j];
            let mut mean = bar;
            for (a, &nb) in nbrs.iter().enumerate() {
                mean += b[a] * (state.beta[(nb, j)] - bar);
            }
            let sd = (hyper.tau2_beta[j] * f.max(0.0)).sqrt();
            let z: f64 = rng.sample(StandardNormal);
            out[(d_idx, j)] = mean + sd * z;
        }
    }
    Ok(out)
}

/// Posterior summary of the treatment effect at one point.
#[derive(Debug, Clone)]
pub struct TauPrediction {
    pub draws: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub lo95: f64,
    pub hi95: f64,
}

/// Draws `tau(x0)` per retained state: coefficient fields conditioned to the
/// new point, latent factors sampled from the supplied agent values there.
pub fn predict_tau_at(
    x0: &[f64],
    agent_values_at_x0: &[(f64, f64)],
    draws: &PosteriorDraws,
    priors: &Priors,
    x_train: &DMatrix<f64>,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TauPrediction> {
    let n_agents = priors.bar_beta.len() - 1;
    if agent_values_at_x0.len() != n_agents {
        return Err(Error::Prediction(format!(
            "expected {} agent values at the prediction point, got {}",
            n_agents,
            agent_values_at_x0.len()
        )));
    }
    for (j, &(_, se)) in agent_values_at_x0.iter().enumerate() {
        if se <= 0.0 {
            return Err(Error::Prediction(format!(
                "agent {j} standard error at the prediction point must be positive, got {se}"
            )));
        }
    }

    let beta = predict_beta_at(x0, draws, priors, x_train, m, rng)?;
    let n_draws = draws.n_draws();
    let mut tau = Vec::with_capacity(n_draws);
    for d in 0..n_draws {
        let mut v = beta[(d, 0)];
        for (j, &(tau_hat, se)) in agent_values_at_x0.iter().enumerate() {
            let f: f64 = tau_hat + se * rng.sample::<f64, _>(StandardNormal);
            v += beta[(d, j + 1)] * f;
        }
        tau.push(v);
    }
    Ok(summarize(tau))
}

pub(crate) fn summarize(draws: Vec<f64>) -> TauPrediction {
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut sorted = draws.clone();
    sorted.sort_by(f64::total_cmp);
    TauPrediction {
        mean,
        sd,
        lo95: quantile_sorted(&sorted, 0.025),
        hi95: quantile_sorted(&sorted, 0.975),
        draws,
    }
}

/// Linear-interpolation quantile of a sorted sample.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < n {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[n - 1]
    }
}
