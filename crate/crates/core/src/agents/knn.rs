//! k-nearest-neighbor T-learner agent.
//!
//! The estimate at a point is the mean outcome of its `k` nearest treated
//! neighbors minus the mean of its `k` nearest control neighbors, with
//! distances taken in per-column standardized coordinates. Standard errors
//! come from half-sampling: the estimator is recomputed on repeated
//! stratified half-samples and the pointwise standard deviation across
//! half-samples is reported. Half-samples use a proportionally smaller `k`,
//! which makes the estimate a conservative (slightly inflated) error
//! measure.

use rand::seq::SliceRandom;

use crate::data::ObservedData;
use crate::error::{Error, Result};
use crate::rngutil;

use super::{FittedAgent, AGENT_SE_FLOOR};

/// Default neighbor count, `ceil(n^0.6)`.
pub fn default_k(n: usize) -> usize {
    (n as f64).powf(0.6).ceil() as usize
}

#[derive(Debug, Clone)]
pub struct FittedKnnAgent {
    /// Standardized training covariates, row-major `n x p`.
    x_std: Vec<Vec<f64>>,
    col_mean: Vec<f64>,
    col_sd: Vec<f64>,
    y: Vec<f64>,
    treated: Vec<usize>,
    control: Vec<usize>,
    k: usize,
    /// Half-sample index sets and the neighbor count used within them.
    subsamples: Vec<(Vec<usize>, Vec<usize>, usize)>,
    train_tau: Vec<f64>,
    train_se: Vec<f64>,
}

pub fn fit_knn_agent(
    data: &ObservedData,
    k: usize,
    subsample_reps: usize,
    seed: u64,
) -> Result<FittedKnnAgent> {
    let n = data.n();
    let p = data.p();
    if k == 0 {
        return Err(Error::Agent("k must be >= 1".to_string()));
    }
    let treated: Vec<usize> = (0..n).filter(|&i| data.t[i] == 1).collect();
    let control: Vec<usize> = (0..n).filter(|&i| data.t[i] == 0).collect();
    if treated.len() < k || control.len() < k {
        return Err(Error::Agent(format!(
            "each arm needs at least k = {k} points, got {} treated and {} control",
            treated.len(),
            control.len()
        )));
    }
    if subsample_reps == 0 {
        return Err(Error::Agent(
            "standard errors require subsample replications (subsample_reps >= 1)".to_string(),
        ));
    }

    let mut col_mean = vec![0.0; p];
    let mut col_sd = vec![0.0; p];
    for c in 0..p {
        let mean = (0..n).map(|i| data.x[(i, c)]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (data.x[(i, c)] - mean).powi(2)).sum::<f64>() / n as f64;
        col_mean[c] = mean;
        col_sd[c] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let x_std: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..p).map(|c| (data.x[(i, c)] - col_mean[c]) / col_sd[c]).collect())
        .collect();

    // stratified half-samples
    let mut rng = rngutil::root(seed);
    let mut subsamples = Vec::with_capacity(subsample_reps);
    for _ in 0..subsample_reps {
        let mut tr = treated.clone();
        let mut co = control.clone();
        tr.shuffle(&mut rng);
        co.shuffle(&mut rng);
        tr.truncate((treated.len() / 2).max(1));
        co.truncate((control.len() / 2).max(1));
        let b = tr.len() + co.len();
        let k_sub = default_k(b).min(tr.len()).min(co.len());
        subsamples.push((tr, co, k_sub));
    }

    let mut agent = FittedKnnAgent {
        x_std,
        col_mean,
        col_sd,
        y: data.y.clone(),
        treated,
        control,
        k,
        subsamples,
        train_tau: Vec::new(),
        train_se: Vec::new(),
    };
    let (mut tau, mut se) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let q = agent.x_std[i].clone();
        let (t, s) = agent.tau_se_std(&q);
        tau.push(t);
        se.push(s);
    }
    agent.train_tau = tau;
    agent.train_se = se;
    Ok(agent)
}

impl FittedKnnAgent {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(c, v)| (v - self.col_mean[c]) / self.col_sd[c])
            .collect()
    }

    /// Mean outcome over the `k` nearest members of `arm` to the
    /// standardized query.
    fn arm_mean(&self, q: &[f64], arm: &[usize], k: usize) -> f64 {
        let mut dists: Vec<(f64, usize)> = arm
            .iter()
            .map(|&i| {
                let d: f64 = self.x_std[i]
                    .iter()
                    .zip(q)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (d, i)
            })
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        dists.iter().take(k).map(|&(_, i)| self.y[i]).sum::<f64>() / k as f64
    }

    fn tau_std(&self, q: &[f64], treated: &[usize], control: &[usize], k: usize) -> f64 {
        self.arm_mean(q, treated, k) - self.arm_mean(q, control, k)
    }

    fn tau_se_std(&self, q: &[f64]) -> (f64, f64) {
        let tau = self.tau_std(q, &self.treated, &self.control, self.k);
        let reps: Vec<f64> = self
            .subsamples
            .iter()
            .map(|(tr, co, k_sub)| self.tau_std(q, tr, co, *k_sub))
            .collect();
        let m = reps.iter().sum::<f64>() / reps.len() as f64;
        let var = reps.iter().map(|v| (v - m).powi(2)).sum::<f64>()
            / (reps.len() as f64 - 1.0).max(1.0);
        (tau, var.sqrt().max(AGENT_SE_FLOOR))
    }
}

impl FittedAgent for FittedKnnAgent {
    fn tau_se_at(&self, x: &[f64]) -> (f64, f64) {
        self.tau_se_std(&self.standardize(x))
    }

    fn train_tau(&self) -> &[f64] {
        &self.train_tau
    }

    fn train_se(&self) -> &[f64] {
        &self.train_se
    }
}
