//! Joint-distribution correctness test for the Gibbs sampler.
//!
//! Two simulators target the same joint distribution of (parameters, data):
//! the marginal-conditional simulator draws parameters from the prior and
//! data from the model, independently each time; the successive-conditional
//! simulator alternates one Gibbs sweep with a redraw of the data from the
//! likelihood. If the sweep's full conditionals are mutually consistent the
//! two produce identical joints, so the moments of any statistic must agree
//! up to Monte Carlo error. Statistic means are compared by z-scores, with
//! an autocorrelation-corrected standard error on the chain side.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

use super::steps::sweep;
use super::{ess_of, inv_gamma_draw, ChainState, LatentVecs, Model, SamplerMutation};
use crate::data::{AgentPosterior, Hyperparams, IgPair, ObservedData, Priors, SamplerSettings};
use crate::error::{Error, Result};
use crate::nngp::{CoeffSet, NngpGraph};
use crate::rngutil;

/// Per-statistic z-scores comparing the two simulators.
#[derive(Debug, Clone)]
pub struct GewekeReport {
    pub z_scores: BTreeMap<String, f64>,
    pub n_draws: usize,
}

impl GewekeReport {
    pub fn max_abs_z(&self) -> f64 {
        self.z_scores.values().fold(0.0, |m, z| m.max(z.abs()))
    }
}

/// Priors suitable for the joint-distribution test: variance priors with
/// finite fourth moments so the monitored statistics have well-defined
/// standard errors, and fixed range bounds on the unit scale of the
/// generated design.
pub fn default_geweke_priors(n_agents: usize) -> Priors {
    let mut bar_beta = vec![1.0 / n_agents as f64; n_agents + 1];
    bar_beta[0] = 0.0;
    let ig = IgPair {
        delta: 10.0,
        eta: 8.0,
    };
    Priors {
        bar_beta,
        bar_mu: 0.0,
        ig_sigma: ig,
        ig_mu: ig,
        ig_beta: vec![ig; n_agents + 1],
        phi_bounds_mu: (0.5, 3.0),
        phi_bounds_beta: (0.5, 3.0),
    }
}

/// Fixed design shared by both simulators.
struct Design {
    data: ObservedData,
    agents: Vec<AgentPosterior>,
    graph_x: NngpGraph,
    graph_z: NngpGraph,
}

fn make_design(n: usize, n_agents: usize, m: usize, rng: &mut ChaCha8Rng) -> Result<Design> {
    use nalgebra::DMatrix;
    let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let t: Vec<u8> = (0..n).map(|i| (i % 2 == 0) as u8).collect();
    let agents: Vec<AgentPosterior> = (0..n_agents)
        .map(|j| {
            let tau_hat: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let se: Vec<f64> = (0..n).map(|_| 0.5 + rng.gen::<f64>()).collect();
            AgentPosterior::new(j, tau_hat, se)
        })
        .collect();
    let mut z = DMatrix::zeros(n, 3);
    z.view_mut((0, 0), (n, 2)).copy_from(&x);
    for i in 0..n {
        z[(i, 2)] = 0.5;
    }
    let graph_x = NngpGraph::build(x.clone(), m)?;
    let graph_z = NngpGraph::build(z, m)?;
    let data = ObservedData {
        y: vec![0.0; n],
        t,
        x,
        pi: Some(vec![0.5; n]),
    };
    Ok(Design {
        data,
        agents,
        graph_x,
        graph_z,
    })
}

/// Draws hyperparameters from the prior and latent fields from the
/// factorized GP prior (sequentially along the graph order).
fn draw_prior_state(design: &Design, priors: &Priors, rng: &mut ChaCha8Rng) -> Result<ChainState> {
    let n = design.data.n();
    let j = design.agents.len();
    let hyper = Hyperparams {
        sigma2: inv_gamma_draw(priors.ig_sigma.delta / 2.0, priors.ig_sigma.eta / 2.0, rng),
        tau2_mu: inv_gamma_draw(priors.ig_mu.delta / 2.0, priors.ig_mu.eta / 2.0, rng),
        tau2_beta: priors
            .ig_beta
            .iter()
            .map(|p| inv_gamma_draw(p.delta / 2.0, p.eta / 2.0, rng))
            .collect(),
        phi_mu: rng.gen_range(priors.phi_bounds_mu.0..priors.phi_bounds_mu.1),
        phi_beta: (0..=j)
            .map(|_| rng.gen_range(priors.phi_bounds_beta.0..priors.phi_bounds_beta.1))
            .collect(),
    };
    let coeffs_mu = CoeffSet::build(&design.graph_z, hyper.phi_mu)?;
    let coeffs_beta = hyper
        .phi_beta
        .iter()
        .map(|&phi| CoeffSet::build(&design.graph_x, phi))
        .collect::<Result<Vec<_>>>()?;

    let mu = draw_field(&design.graph_z, &coeffs_mu, priors.bar_mu, hyper.tau2_mu, rng);
    let beta: Vec<Vec<f64>> = (0..=j)
        .map(|k| {
            draw_field(
                &design.graph_x,
                &coeffs_beta[k],
                priors.bar_beta[k],
                hyper.tau2_beta[k],
                rng,
            )
        })
        .collect();
    let f: Vec<Vec<f64>> = (0..j)
        .map(|k| {
            (0..n)
                .map(|i| {
                    design.agents[k].tau_hat[i]
                        + design.agents[k].se[i] * rng.sample::<f64, _>(StandardNormal)
                })
                .collect()
        })
        .collect();
    Ok(ChainState {
        latent: LatentVecs { mu, beta, f },
        hyper,
        coeffs_mu,
        coeffs_beta,
    })
}

/// Sequential draw of a GP field along the Vecchia ordering: every point's
/// neighbors precede it, so its conditional mean is available when reached.
fn draw_field(
    graph: &NngpGraph,
    coeffs: &CoeffSet,
    mean: f64,
    tau2: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let n = graph.n();
    let mut v = vec![0.0; n];
    for &i in &graph.order {
        let c = &coeffs.coeffs[i];
        let mut cond_mean = 0.0;
        for (k, &nb) in graph.neighbors[i].iter().enumerate() {
            cond_mean += c.b[k] * v[nb];
        }
        let z: f64 = rng.sample(StandardNormal);
        v[i] = cond_mean + (tau2 * c.f).sqrt() * z;
    }
    for vi in &mut v {
        *vi += mean;
    }
    v
}

fn draw_y(design: &Design, state: &ChainState, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = design.data.n();
    (0..n)
        .map(|i| {
            let mean = state.latent.mu[i]
                + if design.data.t[i] == 1 {
                    state.latent.tau(i)
                } else {
                    0.0
                };
            mean + state.hyper.sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal)
        })
        .collect()
}

fn stat_names(n_agents: usize) -> Vec<String> {
    let mut names = vec!["sigma2".to_string(), "tau2_mu".to_string()];
    for j in 0..=n_agents {
        names.push(format!("tau2_beta_{j}"));
    }
    for j in 0..=n_agents {
        names.push(format!("mean_beta_{j}"));
    }
    names.push("mean_mu".to_string());
    names.push("mean_tau".to_string());
    names
}

fn stat_values(state: &ChainState, n: usize, n_agents: usize) -> Vec<f64> {
    let mut v = vec![state.hyper.sigma2, state.hyper.tau2_mu];
    for j in 0..=n_agents {
        v.push(state.hyper.tau2_beta[j]);
    }
    for j in 0..=n_agents {
        v.push(state.latent.beta[j].iter().sum::<f64>() / n as f64);
    }
    v.push(state.latent.mu.iter().sum::<f64>() / n as f64);
    v.push((0..n).map(|i| state.latent.tau(i)).sum::<f64>() / n as f64);
    v
}

/// Runs the joint-distribution test on a small synthetic shape. `mutation`
/// lets a caller demonstrate detection of a deliberately broken step.
pub fn geweke_test(
    n: usize,
    n_agents: usize,
    priors: &Priors,
    settings: &SamplerSettings,
    n_draws: usize,
    mutation: SamplerMutation,
) -> Result<GewekeReport> {
    if n_draws < 10 {
        return Err(Error::Config(format!(
            "insufficient draws for the joint-distribution test: {n_draws}"
        )));
    }
    if !(2..=20).contains(&n) || !(1..=3).contains(&n_agents) {
        return Err(Error::Config(format!(
            "joint-distribution test is restricted to 2 <= n <= 20 and 1 <= J <= 3, got n={n}, J={n_agents}"
        )));
    }
    priors.validate()?;

    let mut design_rng = rngutil::substream(settings.seed, 101);
    let design = make_design(n, n_agents, settings.m, &mut design_rng)?;
    let names = stat_names(n_agents);
    let n_stats = names.len();

    // Marginal-conditional: independent prior/model draws.
    let mut mc = vec![Vec::with_capacity(n_draws); n_stats];
    let mut rng = rngutil::substream(settings.seed, 102);
    for _ in 0..n_draws {
        let state = draw_prior_state(&design, priors, &mut rng)?;
        // y is drawn but enters no monitored statistic directly
        let _y = draw_y(&design, &state, &mut rng);
        for (k, v) in stat_values(&state, n, n_agents).into_iter().enumerate() {
            mc[k].push(v);
        }
    }

    // Successive-conditional: Gibbs sweep against the current data, then
    // redraw the data. Started from an exact prior draw, the chain is
    // stationary from the first step.
    let mut sc = vec![Vec::with_capacity(n_draws); n_stats];
    let mut rng = rngutil::substream(settings.seed, 103);
    let mut state = draw_prior_state(&design, priors, &mut rng)?;
    let mut y = draw_y(&design, &state, &mut rng);
    let sd_mu = 0.1 * (priors.phi_bounds_mu.1 - priors.phi_bounds_mu.0);
    let sd_beta = 0.1 * (priors.phi_bounds_beta.1 - priors.phi_bounds_beta.0);
    for it in 0..n_draws {
        let model = Model {
            y: &y,
            t: &design.data.t,
            agents: &design.agents,
            priors,
            graph_x: &design.graph_x,
            graph_z: &design.graph_z,
        };
        sweep(&model, &mut state, sd_mu, sd_beta, mutation, &mut rng).map_err(|e| {
            Error::Sampler {
                iter: it,
                step: e.0,
                detail: e.1,
            }
        })?;
        y = draw_y(&design, &state, &mut rng);
        for (k, v) in stat_values(&state, n, n_agents).into_iter().enumerate() {
            sc[k].push(v);
        }
    }

    let mut z_scores = BTreeMap::new();
    for k in 0..n_stats {
        let (ma, va) = mean_var(&mc[k]);
        let (mb, vb) = mean_var(&sc[k]);
        let se2 = va / n_draws as f64 + vb / ess_of(&sc[k]);
        let z = if se2 > 0.0 {
            (ma - mb) / se2.sqrt()
        } else {
            0.0
        };
        z_scores.insert(names[k].clone(), z);
    }
    Ok(GewekeReport { z_scores, n_draws })
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}
