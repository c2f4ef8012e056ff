//! Numerical self-check suite behind `bcs validate`.
//!
//! Each check recomputes a quantity the production code produces through an
//! independent dense route and prints one PASS/FAIL line. The exit code is
//! zero only when every check passes.

use std::process::ExitCode;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use bcs_core::data::SamplerSettings;
use bcs_core::error::Error;
use bcs_core::nngp::{conditioning, nngp_log_density, NngpGraph, NBR_JITTER};
use bcs_core::oracle;
use bcs_core::rngutil;
use bcs_core::sampler::{
    default_geweke_priors, geweke_test, sigma2_conditional_draws, tau2_conditional_draws,
    SamplerMutation,
};

fn check(name: &str, pass: bool, detail: String) -> bool {
    println!("{} {name} ({detail})", if pass { "PASS" } else { "FAIL" });
    pass
}

pub(crate) fn cmd_validate(mutate_sigma2: bool, geweke_draws: usize) -> Result<ExitCode, Error> {
    let mut all = true;

    // dense-GP equivalence: with full conditioning sets the factorized
    // density equals the dense multivariate-normal density
    {
        let mut rng = rngutil::root(7001);
        let mut worst: f64 = 0.0;
        for trial in 0..25u32 {
            let d = [1, 3, 5][trial as usize % 3];
            let n = 20;
            let pts = oracle::separated_points(n, d, &mut rng);
            let graph = NngpGraph::build(pts.clone(), n - 1)?;
            let tau2 = 0.5 + rng.gen::<f64>() * 2.0;
            let phi = 0.3 + rng.gen::<f64>() * 2.0;
            let mean = rng.sample::<f64, _>(StandardNormal);
            let values: Vec<f64> =
                (0..n).map(|_| mean + rng.sample::<f64, _>(StandardNormal)).collect();
            let sparse = nngp_log_density(&values, mean, tau2, &graph, phi)?;
            let dense = oracle::mvn_logpdf(&values, mean, &(oracle::dense_corr(&pts, phi) * tau2));
            worst = worst.max((sparse - dense).abs());
        }
        all &= check(
            "dense-gp-equivalence",
            worst < 1e-6,
            format!("max |sparse - dense| = {worst:.3e}, tolerance 1e-6"),
        );
    }

    // conditioning coefficients against brute-force Schur complements
    {
        let mut rng = rngutil::root(7002);
        let mut worst: f64 = 0.0;
        let mut checked = 0usize;
        while checked < 1000 {
            let n = 2 + (rng.gen::<u32>() % 6) as usize;
            let d = 1 + (rng.gen::<u32>() % 3) as usize;
            let pts = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let phi = 0.2 + rng.gen::<f64>() * 3.0;
            let graph = NngpGraph::build(pts, 5)?;
            for i in 0..n {
                let c = conditioning(i, &graph, phi)?;
                let (b_ref, f_ref) =
                    oracle::schur_b_f(&graph.nbr_dist[i], &graph.nbr_cross[i], phi, NBR_JITTER);
                for (got, want) in c.b.iter().zip(b_ref.iter()) {
                    worst = worst.max((got - want).abs());
                }
                worst = worst.max((c.f - f_ref).abs());
                checked += 1;
            }
        }
        all &= check(
            "schur-conditioning",
            worst < 1e-10,
            format!("{checked} configurations, max deviation {worst:.3e}, tolerance 1e-10"),
        );
    }

    // variance full-conditional draws against closed-form CDFs
    {
        let n_draws = 100_000;
        let crit = 1.9495 / (n_draws as f64).sqrt(); // alpha = 0.001
        let mut draws = sigma2_conditional_draws(4.0, 2.0, &[1.0, -1.0], n_draws, 7003);
        let d_sigma = oracle::ks_statistic(&mut draws, |x| oracle::inv_gamma_cdf(x, 3.0, 2.0));
        let mut draws = tau2_conditional_draws(6.0, 4.0, 3.5, 7, n_draws, 7004);
        let d_tau = oracle::ks_statistic(&mut draws, |x| oracle::inv_gamma_cdf(x, 6.5, 3.75));
        let worst = d_sigma.max(d_tau);
        all &= check(
            "variance-conditional-ks",
            worst < crit,
            format!("KS statistics {d_sigma:.5} / {d_tau:.5}, critical value {crit:.5}"),
        );
    }

    // joint-distribution test of the full Gibbs sweep
    {
        let mutation = if mutate_sigma2 {
            SamplerMutation::Sigma2ScaleHalved
        } else {
            SamplerMutation::None
        };
        let priors = default_geweke_priors(2);
        let settings = SamplerSettings {
            m: 3,
            seed: 7005,
            ..SamplerSettings::default()
        };
        let report = geweke_test(10, 2, &priors, &settings, geweke_draws, mutation)?;
        let max_z = report.max_abs_z();
        let worst_stat = report
            .z_scores
            .iter()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(k, _)| k.clone())
            .unwrap_or_default();
        all &= check(
            "geweke-joint-distribution",
            max_z < 4.0,
            format!("{geweke_draws} draws, max |z| = {max_z:.2} ({worst_stat}), threshold 4"),
        );
    }

    if all {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(1))
    }
}
