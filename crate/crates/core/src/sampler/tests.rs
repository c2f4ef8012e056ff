use super::steps::*;
use super::*;
use crate::data::IgPair;
use crate::nngp::NngpGraph;
use crate::oracle;
use approx::assert_relative_eq;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

/// Small synthetic problem with direct control over every piece.
struct Fixture {
    data: ObservedData,
    agents: Vec<AgentPosterior>,
    priors: Priors,
    graph_x: NngpGraph,
    graph_z: NngpGraph,
}

impl Fixture {
    fn new(n: usize, n_agents: usize, m: usize, t: Vec<u8>, seed: u64) -> Self {
        let mut rng = rngutil::root(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let agents: Vec<AgentPosterior> = (0..n_agents)
            .map(|j| {
                let tau_hat: Vec<f64> =
                    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let se: Vec<f64> = (0..n).map(|_| 0.4 + rng.gen::<f64>()).collect();
                AgentPosterior::new(j, tau_hat, se)
            })
            .collect();
        let mut z = DMatrix::zeros(n, 3);
        z.view_mut((0, 0), (n, 2)).copy_from(&x);
        for i in 0..n {
            z[(i, 2)] = 0.5;
        }
        let graph_x = NngpGraph::build(x.clone(), m).unwrap();
        let graph_z = NngpGraph::build(z, m).unwrap();
        let mut bar_beta = vec![1.0 / n_agents as f64; n_agents + 1];
        bar_beta[0] = 0.0;
        let priors = Priors {
            bar_beta,
            bar_mu: 0.0,
            ig_sigma: IgPair { delta: 4.0, eta: 2.0 },
            ig_mu: IgPair { delta: 4.0, eta: 2.0 },
            ig_beta: vec![IgPair { delta: 4.0, eta: 2.0 }; n_agents + 1],
            phi_bounds_mu: (0.5, 3.0),
            phi_bounds_beta: (0.5, 3.0),
        };
        let data = ObservedData {
            y,
            t,
            x,
            pi: Some(vec![0.5; n]),
        };
        Fixture {
            data,
            agents,
            priors,
            graph_x,
            graph_z,
        }
    }

    fn model(&self) -> Model<'_> {
        Model {
            y: &self.data.y,
            t: &self.data.t,
            agents: &self.agents,
            priors: &self.priors,
            graph_x: &self.graph_x,
            graph_z: &self.graph_z,
        }
    }
}

#[test]
fn beta_conditional_reduces_to_prior_for_isolated_untreated_point() {
    // n = 1, T = 0: no likelihood, no neighbors -> beta_j ~ N(bar_j, tau2_j).
    let fx = Fixture::new(1, 1, 1, vec![0], 2);
    let model = fx.model();
    let mut state = init_state(&model).unwrap();
    state.hyper.tau2_beta = vec![1.7, 0.6];
    let (a, btilde) = beta_full_conditional(&model, &state, 0);
    assert_relative_eq!(a[0], 1.0 / 1.7, epsilon = 1e-12);
    assert_relative_eq!(a[3], 1.0 / 0.6, epsilon = 1e-12);
    assert_eq!(a[1], 0.0);
    assert_eq!(a[2], 0.0);
    assert_eq!(btilde, vec![0.0, 0.0]);
}

#[test]
fn beta_conditional_zero_factor_decouples() {
    // J = 1, T_i = 1, f_1i = 0: the factor coefficient keeps its prior
    // precision while the intercept gains the likelihood's 1/sigma2.
    let fx = Fixture::new(1, 1, 1, vec![1], 3);
    let model = fx.model();
    let mut state = init_state(&model).unwrap();
    state.latent.f[0][0] = 0.0;
    state.hyper.sigma2 = 2.0;
    state.hyper.tau2_beta = vec![1.0, 1.0];
    let (a, _) = beta_full_conditional(&model, &state, 0);
    assert_relative_eq!(a[0], 1.0 + 0.5, epsilon = 1e-12); // gamma + 1/sigma2
    assert_relative_eq!(a[3], 1.0, epsilon = 1e-12); // prior only
    assert_eq!(a[1], 0.0); // f = 0 kills the cross term
}

#[test]
fn beta_draws_match_dense_prior_conditional_under_flat_likelihood() {
    // Full conditioning sets make the factorized prior the exact GP, so the
    // full conditional of one point's coefficients under a flattened
    // likelihood must match the dense-precision Gaussian conditional.
    let n = 5;
    let fx = Fixture::new(n, 1, n - 1, vec![1; n], 7);
    let model = fx.model();
    let mut state = init_state(&model).unwrap();
    state.hyper.sigma2 = 1e12;
    state.hyper.tau2_beta = vec![1.3, 0.8];
    state.hyper.phi_beta = vec![0.9, 1.4];
    state.coeffs_beta = state
        .hyper
        .phi_beta
        .iter()
        .map(|&phi| crate::nngp::CoeffSet::build(&fx.graph_x, phi).unwrap())
        .collect();
    let mut rng = rngutil::root(99);
    for j in 0..=1 {
        for (i, v) in state.latent.beta[j].iter_mut().enumerate() {
            *v = fx.priors.bar_beta[j] + 0.3 * (i as f64 - 2.0);
        }
    }

    let target = 2usize;
    let n_draws = 100_000;
    let mut draws = [Vec::with_capacity(n_draws), Vec::with_capacity(n_draws)];
    let keep: Vec<Vec<f64>> = state.latent.beta.clone();
    for _ in 0..n_draws {
        draw_beta_point(&model, &mut state, target, &mut rng).unwrap();
        draws[0].push(state.latent.beta[0][target]);
        draws[1].push(state.latent.beta[1][target]);
        // restore so every draw sees the same conditioning values
        state.latent.beta[0][target] = keep[0][target];
        state.latent.beta[1][target] = keep[1][target];
    }

    for j in 0..=1 {
        let prec = oracle::dense_gp_precision(
            &fx.graph_x.points,
            state.hyper.phi_beta[j],
            state.hyper.tau2_beta[j],
        );
        let (want_mean, want_var) = oracle::conditional_from_precision(
            &prec,
            &keep[j],
            fx.priors.bar_beta[j],
            target,
        );
        let m = draws[j].iter().sum::<f64>() / n_draws as f64;
        let v = draws[j].iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n_draws - 1) as f64;
        let mc_se = (want_var / n_draws as f64).sqrt();
        assert!(
            (m - want_mean).abs() < 6.0 * mc_se,
            "field {j}: mean {m} vs {want_mean} (mc se {mc_se})"
        );
        assert!(
            (v / want_var - 1.0).abs() < 0.05,
            "field {j}: var {v} vs {want_var}"
        );
    }
}

#[test]
fn mu_conditional_is_conjugate_normal_at_n1() {
    let fx = Fixture::new(1, 1, 1, vec![1], 5);
    let mut fx = fx;
    fx.priors.bar_mu = 0.4;
    let model = fx.model();
    let mut state = init_state(&model).unwrap();
    state.hyper.sigma2 = 2.0;
    state.hyper.tau2_mu = 3.0;
    // pin the treatment block so y_tilde is known
    state.latent.beta = vec![vec![0.0], vec![0.0]];
    state.latent.f[0][0] = 0.0;
    let ytilde = model.y[0];
    let (mean, var) = mu_full_conditional(&model, &state, 0);
    let want_prec = 1.0 / 2.0 + 1.0 / 3.0;
    let want_mean = (ytilde / 2.0 + 0.4 / 3.0) / want_prec;
    assert_relative_eq!(mean, want_mean, epsilon = 1e-12);
    assert_relative_eq!(var, 1.0 / want_prec, epsilon = 1e-12);
}

#[test]
fn mu_conditional_tracks_likelihood_when_noise_vanishes() {
    let n = 6;
    let fx = Fixture::new(n, 1, 3, vec![0; n], 6);
    let model = fx.model();
    let mut state = init_state(&model).unwrap();
    state.hyper.sigma2 = 1e-12;
    for i in 0..n {
        let (mean, _) = mu_full_conditional(&model, &state, i);
        assert_relative_eq!(mean, model.y[i], epsilon = 1e-6);
    }
}

#[test]
fn factor_conditional_decouples_when_coefficient_or_treatment_vanish() {
    let fx = Fixture::new(4, 2, 2, vec![1, 0, 1, 0], 8);
    let model = fx.model();
    let mut state = init_state(&model).unwrap();
    // beta_{1,0} = 0 on a treated point: prior exactly
    state.latent.beta[1][0] = 0.0;
    let (mean, var) = f_full_conditional(&model, &state, 0, 0);
    assert_relative_eq!(mean, model.agents[0].tau_hat[0], epsilon = 1e-12);
    assert_relative_eq!(var, model.agents[0].se[0].powi(2), epsilon = 1e-12);
    // untreated point: prior exactly, regardless of beta
    let (mean, var) = f_full_conditional(&model, &state, 1, 1);
    assert_relative_eq!(mean, model.agents[1].tau_hat[1], epsilon = 1e-12);
    assert_relative_eq!(var, model.agents[1].se[1].powi(2), epsilon = 1e-12);
    // posterior variance never exceeds the agent prior variance
    for i in 0..4 {
        for j in 0..2 {
            let (_, v) = f_full_conditional(&model, &state, i, j);
            assert!(v <= model.agents[j].se[i].powi(2) + 1e-15);
        }
    }
}

#[test]
fn tau2_params_zero_residual_and_single_point() {
    // centered field -> scale is eta/2 exactly
    let n = 5;
    let fx = Fixture::new(n, 1, 2, vec![1; n], 9);
    let model = fx.model();
    let mut state = init_state(&model).unwrap();
    for j in 0..=1 {
        for v in state.latent.beta[j].iter_mut() {
            *v = fx.priors.bar_beta[j];
        }
        let (shape, scale) = tau2_beta_params(&model, &state, j);
        assert_relative_eq!(shape, (4.0 + n as f64) / 2.0, epsilon = 1e-12);
        assert_relative_eq!(scale, 2.0 / 2.0, epsilon = 1e-12);
    }

    // prognostic field pinned at its prior mean: scale is eta/2 exactly
    let fx_mu = Fixture::new(4, 1, 2, vec![1, 0, 1, 0], 19);
    let model_mu = fx_mu.model();
    let mut state_mu = init_state(&model_mu).unwrap();
    for v in state_mu.latent.mu.iter_mut() {
        *v = fx_mu.priors.bar_mu;
    }
    let (shape, scale) = tau2_mu_params(&model_mu, &state_mu);
    assert_relative_eq!(shape, (4.0 + 4.0) / 2.0, epsilon = 1e-12);
    assert_relative_eq!(scale, 2.0 / 2.0, epsilon = 1e-12);

    // single point: F = 1, residual c
    let fx1 = Fixture::new(1, 1, 1, vec![1], 10);
    let model1 = fx1.model();
    let mut state1 = init_state(&model1).unwrap();
    let c = 1.9;
    state1.latent.beta[0][0] = fx1.priors.bar_beta[0] + c;
    let (shape, scale) = tau2_beta_params(&model1, &state1, 0);
    assert_relative_eq!(shape, (4.0 + 1.0) / 2.0, epsilon = 1e-12);
    assert_relative_eq!(scale, (2.0 + c * c) / 2.0, epsilon = 1e-12);
}

#[test]
fn sigma2_params_from_fixed_residuals() {
    // perfect fit -> scale eta/2; residuals (1, -1) -> scale eta/2 + 1
    let fx = Fixture::new(2, 1, 1, vec![0, 0], 11);
    let model = fx.model();
    let mut state = init_state(&model).unwrap();
    state.latent.mu[0] = model.y[0];
    state.latent.mu[1] = model.y[1];
    let sum_sq: f64 = (0..2)
        .map(|i| {
            let r = y_tilde(&model, &state, i) - state.latent.mu[i];
            r * r
        })
        .sum();
    assert_relative_eq!(sum_sq, 0.0, epsilon = 1e-24);
    state.latent.mu[0] = model.y[0] - 1.0;
    state.latent.mu[1] = model.y[1] + 1.0;
    let sum_sq: f64 = (0..2)
        .map(|i| {
            let r = y_tilde(&model, &state, i) - state.latent.mu[i];
            r * r
        })
        .sum();
    assert_relative_eq!(sum_sq, 2.0, epsilon = 1e-24);
}

#[test]
fn variance_conditional_draws_pass_ks_against_closed_form() {
    // sigma2 | residuals (1,-1), delta = 4, eta = 2 -> IG(3, 2)
    let n_draws = 20_000;
    let mut draws = sigma2_conditional_draws(4.0, 2.0, &[1.0, -1.0], n_draws, 17);
    let d = oracle::ks_statistic(&mut draws, |x| oracle::inv_gamma_cdf(x, 3.0, 2.0));
    let crit = 1.9495 / (n_draws as f64).sqrt(); // alpha = 0.001
    assert!(d < crit, "KS statistic {d} over critical value {crit}");

    // tau2 | quadform 3.5 at n = 7, delta 6, eta 4 -> IG(6.5, 3.75)
    let mut draws = tau2_conditional_draws(6.0, 4.0, 3.5, 7, n_draws, 18);
    let d = oracle::ks_statistic(&mut draws, |x| oracle::inv_gamma_cdf(x, 6.5, 3.75));
    assert!(d < crit, "KS statistic {d} over critical value {crit}");
}

#[test]
fn phi_step_with_null_proposal_always_accepts() {
    let fx = Fixture::new(10, 1, 3, vec![1; 10], 12);
    let model = fx.model();
    let mut state = init_state(&model).unwrap();
    let mut rng = rngutil::root(1);
    let mut accepts = 0;
    for _ in 0..100 {
        let accepted = phi_mh_step(
            model.graph_x,
            &mut state.coeffs_beta[0],
            &mut state.hyper.phi_beta[0],
            &state.latent.beta[0],
            model.priors.bar_beta[0],
            state.hyper.tau2_beta[0],
            model.priors.phi_bounds_beta,
            1e-15,
            &mut rng,
        )
        .unwrap();
        accepts += accepted as usize;
    }
    assert_eq!(accepts, 100);
}

#[test]
fn reflection_stays_strictly_inside() {
    for &(x, lo, hi) in &[
        (0.55, 0.5, 3.0),
        (-7.3, 0.5, 3.0),
        (14.2, 0.5, 3.0),
        (3.0, 0.5, 3.0),
        (0.5, 0.5, 3.0),
        (1e6, 0.5, 3.0),
    ] {
        let r = reflect_into(x, lo, hi);
        assert!(r > lo && r < hi, "reflect({x}) = {r}");
    }
}

#[test]
fn chain_retains_expected_draws_and_is_deterministic() {
    let fx = Fixture::new(24, 2, 4, (0..24).map(|i| (i % 2) as u8).collect(), 13);
    let settings = SamplerSettings {
        m: 4,
        n_iter: 60,
        n_burn: 20,
        thin: 1,
        seed: 31,
        phi_proposal_sd: None,
    };
    let out1 = run_chain(&fx.data, &fx.agents, Some(fx.priors.clone()), &settings).unwrap();
    assert_eq!(out1.draws.n_draws(), 40);
    assert_eq!(out1.diagnostics.log_joint.len(), 60);
    let out2 = run_chain(&fx.data, &fx.agents, Some(fx.priors.clone()), &settings).unwrap();
    assert_eq!(out1.draws.tau, out2.draws.tau);
    for (a, b) in out1.draws.states.iter().zip(out2.draws.states.iter()) {
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    // invariants on every retained draw
    for (_, hyper) in &out1.draws.states {
        assert!(hyper.sigma2 > 0.0);
        assert!(hyper.tau2_mu > 0.0);
        assert!(hyper.tau2_beta.iter().all(|&v| v > 0.0));
        let (lo, hi) = fx.priors.phi_bounds_mu;
        assert!(hyper.phi_mu > lo && hyper.phi_mu < hi);
        let (lo, hi) = fx.priors.phi_bounds_beta;
        assert!(hyper.phi_beta.iter().all(|&p| p > lo && p < hi));
    }
    assert!(out1.draws.tau_identity_max_err() < 1e-12);
    assert!(out1.diagnostics.ess.contains_key("mean_tau"));
}

#[test]
fn thinning_reduces_retained_draws() {
    let fx = Fixture::new(16, 1, 3, (0..16).map(|i| (i % 2) as u8).collect(), 14);
    let settings = SamplerSettings {
        m: 3,
        n_iter: 50,
        n_burn: 10,
        thin: 4,
        seed: 3,
        phi_proposal_sd: None,
    };
    let out = run_chain(&fx.data, &fx.agents, Some(fx.priors.clone()), &settings).unwrap();
    assert_eq!(out.draws.n_draws(), 10);
}

#[test]
fn fields_recover_prior_moments_when_likelihood_is_disabled() {
    // All units untreated and the noise variance pinned enormous by its
    // prior: the beta fields never see the likelihood and mu's share is
    // O(1e-6). Field moments over the chain must match the exact GP prior
    // (full conditioning sets).
    let n = 10;
    let mut fx = Fixture::new(n, 1, n - 1, vec![0; n], 15);
    let huge = IgPair {
        delta: 1e6,
        eta: 1e12,
    };
    let unit = IgPair {
        delta: 1e6,
        eta: 1e6,
    };
    fx.priors.ig_sigma = huge;
    fx.priors.ig_mu = unit;
    fx.priors.ig_beta = vec![unit; 2];
    fx.priors.phi_bounds_mu = (0.999, 1.001);
    fx.priors.phi_bounds_beta = (0.999, 1.001);
    let model = fx.model();
    let mut state = init_state(&model).unwrap();
    let mut rng = rngutil::root(77);

    let sweeps = 6000;
    let mut sums = vec![0.0; n];
    let mut sq = vec![0.0; n];
    let mut pair_prod = 0.0;
    let mut kept = 0.0;
    for it in 0..sweeps {
        sweep(&model, &mut state, 1e-4, 1e-4, SamplerMutation::None, &mut rng).unwrap();
        if it % 3 != 0 {
            continue;
        }
        kept += 1.0;
        for i in 0..n {
            let v = state.latent.beta[0][i];
            sums[i] += v;
            sq[i] += v * v;
        }
        pair_prod += state.latent.beta[0][0] * state.latent.beta[0][1];
    }
    let d01 = (fx.graph_x.points.row(0) - fx.graph_x.points.row(1)).norm();
    let want_corr = (-d01 / 1.0f64).exp();
    let mean0 = sums[0] / kept;
    let mean1 = sums[1] / kept;
    for i in 0..n {
        let mean = sums[i] / kept;
        let var = sq[i] / kept - mean * mean;
        assert!(mean.abs() < 0.12, "beta_0 mean at {i}: {mean}");
        assert!((var - 1.0).abs() < 0.2, "beta_0 var at {i}: {var}");
    }
    let cov01 = pair_prod / kept - mean0 * mean1;
    assert!(
        (cov01 - want_corr).abs() < 0.2,
        "pair covariance {cov01} vs {want_corr}"
    );
}

#[test]
fn geweke_insufficient_draws_errors() {
    let priors = default_geweke_priors(1);
    let settings = SamplerSettings {
        m: 3,
        ..SamplerSettings::default()
    };
    let err = geweke_test(6, 1, &priors, &settings, 0, SamplerMutation::None).unwrap_err();
    assert!(err.to_string().contains("insufficient draws"));
}

#[test]
fn geweke_smoke_consistent_sampler() {
    let priors = default_geweke_priors(1);
    let settings = SamplerSettings {
        m: 3,
        seed: 4242,
        ..SamplerSettings::default()
    };
    let report = geweke_test(6, 1, &priors, &settings, 800, SamplerMutation::None).unwrap();
    assert!(report.z_scores.values().all(|z| z.is_finite()));
    assert!(
        report.max_abs_z() < 5.0,
        "smoke z-scores {:?}",
        report.z_scores
    );
}

#[test]
fn geweke_detects_corrupted_sigma2_step() {
    let priors = default_geweke_priors(1);
    let settings = SamplerSettings {
        m: 3,
        seed: 4243,
        ..SamplerSettings::default()
    };
    let report =
        geweke_test(6, 1, &priors, &settings, 1200, SamplerMutation::Sigma2ScaleHalved).unwrap();
    assert!(
        report.max_abs_z() > 4.0,
        "corruption went undetected: {:?}",
        report.z_scores
    );
}

#[test]
fn truth_agent_posterior_tracks_truth_pointwise() {
    // A single agent equal to the truth with tiny se: the posterior mean of
    // tau should sit within 2 posterior sds of the truth at nearly every
    // point (the nominal miss rate of a 2-sd band is ~5%).
    let mut rng = rngutil::root(61);
    let n = 100;
    let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let truth: Vec<f64> = (0..n).map(|i| 1.0 + x[(i, 0)] - 0.5 * x[(i, 1)]).collect();
    let t: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            2.0 + 0.3 * x[(i, 1)]
                + t[i] as f64 * truth[i]
                + rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let agents = vec![AgentPosterior::new(0, truth.clone(), vec![0.01; n])];
    let data = ObservedData {
        y,
        t,
        x,
        pi: Some(vec![0.5; n]),
    };
    let settings = SamplerSettings {
        m: 10,
        n_iter: 1500,
        n_burn: 500,
        thin: 1,
        seed: 13,
        phi_proposal_sd: None,
    };
    let out = run_chain(&data, &agents, None, &settings).unwrap();
    let n_draws = out.draws.n_draws() as f64;
    let mut within = 0usize;
    for (i, truth_i) in truth.iter().enumerate() {
        let mean = (0..out.draws.n_draws()).map(|d| out.draws.tau[(d, i)]).sum::<f64>() / n_draws;
        let sd = ((0..out.draws.n_draws())
            .map(|d| (out.draws.tau[(d, i)] - mean).powi(2))
            .sum::<f64>()
            / (n_draws - 1.0))
            .sqrt();
        if (mean - truth_i).abs() <= 2.0 * sd.max(1e-6) {
            within += 1;
        }
    }
    assert!(
        within >= n * 9 / 10,
        "only {within}/{n} points within 2 posterior sds of truth"
    );
}

#[test]
fn ess_of_iid_series_is_near_length() {
    let mut rng = rngutil::root(50);
    let xs: Vec<f64> = (0..2000).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let e = ess_of(&xs);
    assert!(e > 1200.0, "iid ESS {e}");
    // perfectly correlated series has tiny ESS
    let ys: Vec<f64> = (0..2000).map(|i| (i as f64 / 500.0).sin()).collect();
    assert!(ess_of(&ys) < 100.0);
}
