//! Domain data model shared by all modules.
//!
//! All types here are immutable value objects after construction; they are
//! safe to share across threads by reference or by copy.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Agent standard errors below this are rejected outright; callers must
/// decide how to handle a degenerate estimator, we do not silently floor.
pub const SE_FLOOR: f64 = 1e-8;

/// Observed treatment/outcome data after covariate encoding.
#[derive(Debug, Clone)]
pub struct ObservedData {
    /// Outcome, length `n`.
    pub y: Vec<f64>,
    /// Binary treatment indicator, length `n`.
    pub t: Vec<u8>,
    /// Encoded covariates, `n x p`.
    pub x: DMatrix<f64>,
    /// Known propensity scores in (0,1), if available.
    pub pi: Option<Vec<f64>>,
}

impl ObservedData {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Number of treated units.
    pub fn n_treated(&self) -> usize {
        self.t.iter().filter(|&&t| t == 1).count()
    }
}

/// Pointwise approximate posterior of one base estimator: at each training
/// point, the estimate `tau_hat` and its standard error `se`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentPosterior {
    /// Estimator index (0-based).
    pub j: usize,
    pub tau_hat: Vec<f64>,
    pub se: Vec<f64>,
}

impl AgentPosterior {
    pub fn new(j: usize, tau_hat: Vec<f64>, se: Vec<f64>) -> Self {
        AgentPosterior { j, tau_hat, se }
    }
}

/// Inverse-gamma hyperparameter pair; the prior is IG(delta/2, eta/2).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IgPair {
    pub delta: f64,
    pub eta: f64,
}

impl IgPair {
    /// Prior mean when it exists (delta > 2), else 1. Used for chain
    /// initialization only.
    pub fn init_value(&self) -> f64 {
        if self.delta > 2.0 {
            self.eta / (self.delta - 2.0)
        } else {
            1.0
        }
    }
}

impl Default for IgPair {
    fn default() -> Self {
        IgPair {
            delta: 2.0,
            eta: 1.0,
        }
    }
}

/// Fully resolved prior specification for the synthesis model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    /// Prior means of the varying coefficients, length `J+1`; index 0 is the
    /// intercept field. Default `(0, 1/J, ..., 1/J)` makes the prior
    /// synthesis an equal-weight average of the `J` estimators.
    pub bar_beta: Vec<f64>,
    /// Prior mean of the prognostic surface.
    pub bar_mu: f64,
    pub ig_sigma: IgPair,
    pub ig_mu: IgPair,
    /// Per-field variance priors, length `J+1`.
    pub ig_beta: Vec<IgPair>,
    /// Uniform prior bounds for the prognostic range parameter.
    pub phi_bounds_mu: (f64, f64),
    /// Uniform prior bounds shared by all coefficient range parameters.
    pub phi_bounds_beta: (f64, f64),
}

impl Priors {
    /// Default priors for `n_agents` estimators: equal prior weights,
    /// `bar_mu` at the control-arm outcome mean, IG(2,1) variance priors,
    /// and range bounds `(0.05 D, 2 D)` from the maximum pairwise distance
    /// `D` in the respective input space.
    pub fn default_for(data: &ObservedData, z: &DMatrix<f64>, n_agents: usize) -> Self {
        let j = n_agents;
        let mut bar_beta = vec![1.0 / j as f64; j + 1];
        bar_beta[0] = 0.0;
        let control_mean = {
            let (mut s, mut c) = (0.0, 0usize);
            for i in 0..data.n() {
                if data.t[i] == 0 {
                    s += data.y[i];
                    c += 1;
                }
            }
            if c > 0 {
                s / c as f64
            } else {
                0.0
            }
        };
        Priors {
            bar_beta,
            bar_mu: control_mean,
            ig_sigma: IgPair::default(),
            ig_mu: IgPair::default(),
            ig_beta: vec![IgPair::default(); j + 1],
            phi_bounds_mu: default_phi_bounds(z),
            phi_bounds_beta: default_phi_bounds(&data.x),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut items = Vec::new();
        for (name, p) in [("sigma2", &self.ig_sigma), ("tau2_mu", &self.ig_mu)] {
            if p.delta <= 0.0 || p.eta <= 0.0 {
                items.push(format!("inverse-gamma prior for {name} must have delta, eta > 0"));
            }
        }
        for (j, p) in self.ig_beta.iter().enumerate() {
            if p.delta <= 0.0 || p.eta <= 0.0 {
                items.push(format!("inverse-gamma prior for tau2_beta[{j}] must have delta, eta > 0"));
            }
        }
        for (name, (lo, hi)) in [
            ("phi_mu", self.phi_bounds_mu),
            ("phi_beta", self.phi_bounds_beta),
        ] {
            if !(0.0 < lo && lo < hi) {
                items.push(format!("range bounds for {name} must satisfy 0 < lo < hi, got ({lo}, {hi})"));
            }
        }
        if self.ig_beta.len() != self.bar_beta.len() {
            items.push("ig_beta and bar_beta must have equal length J+1".to_string());
        }
        if items.is_empty() {
            Ok(())
        } else {
            Err(Error::validation(items))
        }
    }
}

/// `(0.05 D, 2 D)` where `D` is the maximum pairwise distance between rows.
/// Falls back to (0.05, 2) when all points coincide.
pub fn default_phi_bounds(points: &DMatrix<f64>) -> (f64, f64) {
    let n = points.nrows();
    let mut d_max: f64 = 0.0;
    for i in 0..n {
        for k in (i + 1)..n {
            let d = (points.row(i) - points.row(k)).norm();
            if d > d_max {
                d_max = d;
            }
        }
    }
    if d_max <= 0.0 {
        d_max = 1.0;
    }
    (0.05 * d_max, 2.0 * d_max)
}

/// Current values of the model's variance and range parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub sigma2: f64,
    pub tau2_mu: f64,
    /// Length `J+1`.
    pub tau2_beta: Vec<f64>,
    pub phi_mu: f64,
    /// Length `J+1`.
    pub phi_beta: Vec<f64>,
}

/// Gibbs sampler settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    /// Nearest-neighbor count for the GP graphs.
    pub m: usize,
    pub n_iter: usize,
    pub n_burn: usize,
    pub thin: usize,
    pub seed: u64,
    /// Random-walk step for the range-parameter Metropolis updates; `None`
    /// scales to a tenth of the prior bound span per field.
    pub phi_proposal_sd: Option<f64>,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            m: 15,
            n_iter: 2000,
            n_burn: 500,
            thin: 1,
            seed: 0,
            phi_proposal_sd: None,
        }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        let mut items = Vec::new();
        if self.m < 1 {
            items.push("m must be >= 1".to_string());
        }
        if self.n_burn >= self.n_iter {
            items.push(format!(
                "n_burn ({}) must be smaller than n_iter ({})",
                self.n_burn, self.n_iter
            ));
        }
        if self.thin < 1 {
            items.push("thin must be >= 1".to_string());
        }
        if let Some(sd) = self.phi_proposal_sd {
            if sd <= 0.0 {
                items.push("phi_proposal_sd must be positive".to_string());
            }
        }
        if items.is_empty() {
            Ok(())
        } else {
            Err(Error::validation(items))
        }
    }

    /// Number of retained draws.
    pub fn n_retained(&self) -> usize {
        (self.n_iter - self.n_burn).div_ceil(self.thin)
    }
}

/// One Gibbs state of the latent fields.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// Prognostic values, length `n`.
    pub mu: Vec<f64>,
    /// Varying coefficients, `n x (J+1)`; column 0 is the intercept field.
    pub beta: DMatrix<f64>,
    /// Latent factors, `n x J`.
    pub f: DMatrix<f64>,
}

impl LatentState {
    /// `tau(x_i) = beta_0(x_i) + sum_j beta_j(x_i) f_j(x_i)` for every i.
    pub fn tau(&self) -> Vec<f64> {
        let n = self.mu.len();
        let j = self.f.ncols();
        (0..n)
            .map(|i| {
                let mut v = self.beta[(i, 0)];
                for k in 0..j {
                    v += self.beta[(i, k + 1)] * self.f[(i, k)];
                }
                v
            })
            .collect()
    }
}

/// Retained Gibbs output.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub states: Vec<(LatentState, Hyperparams)>,
    /// Treatment-effect draws, `draws x n`; row `d` is computed from
    /// `states[d]` exactly.
    pub tau: DMatrix<f64>,
}

impl PosteriorDraws {
    pub fn n_draws(&self) -> usize {
        self.states.len()
    }

    /// Largest discrepancy between stored tau draws and the identity
    /// recomputed from the stored states. Zero up to floating-point identity
    /// by construction.
    pub fn tau_identity_max_err(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for (d, (state, _)) in self.states.iter().enumerate() {
            for (i, v) in state.tau().iter().enumerate() {
                worst = worst.max((self.tau[(d, i)] - v).abs());
            }
        }
        worst
    }
}

/// Summary facts about a validated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n: usize,
    pub p: usize,
    pub n_agents: usize,
    pub treated_fraction: f64,
}

/// Checks every type invariant of the dataset and agent set; returns summary
/// facts on success, or the itemized list of every violation found.
pub fn validate_dataset(data: &ObservedData, agents: &[AgentPosterior]) -> Result<ValidationReport> {
    let mut items = Vec::new();
    let n = data.y.len();

    if n < 2 {
        items.push(format!("need at least 2 observations, got {n}"));
    }
    if data.t.len() != n {
        items.push(format!("t has length {}, expected {n}", data.t.len()));
    }
    if data.x.nrows() != n {
        items.push(format!("x has {} rows, expected {n}", data.x.nrows()));
    }
    for (i, &t) in data.t.iter().enumerate() {
        if t > 1 {
            items.push(format!("t[{i}] = {t} is not in {{0,1}}"));
        }
    }
    let n_treated = data.t.iter().filter(|&&t| t == 1).count();
    if n_treated == 0 || n_treated == data.t.len() {
        items.push("both treatment arms required".to_string());
    }
    if let Some(pi) = &data.pi {
        if pi.len() != n {
            items.push(format!("pi has length {}, expected {n}", pi.len()));
        }
        for (i, &p) in pi.iter().enumerate() {
            if !(p > 0.0 && p < 1.0) {
                items.push(format!("pi[{i}] = {p} must lie strictly in (0,1)"));
            }
        }
    }
    for (i, &v) in data.y.iter().enumerate() {
        if !v.is_finite() {
            items.push(format!("y[{i}] = {v} is not finite"));
        }
    }

    for agent in agents {
        let tag = format!("agent {}", agent.j);
        if agent.tau_hat.len() != n {
            items.push(format!("{tag}: tau_hat has length {}, expected {n}", agent.tau_hat.len()));
        }
        if agent.se.len() != n {
            items.push(format!("{tag}: se has length {}, expected {n}", agent.se.len()));
        }
        for (i, &s) in agent.se.iter().enumerate() {
            if s <= 0.0 {
                items.push(format!("{tag}: nonpositive standard error at row {i}"));
            } else if s < SE_FLOOR {
                items.push(format!("{tag}: standard error {s} at row {i} below {SE_FLOOR} floor"));
            }
        }
        for (i, &v) in agent.tau_hat.iter().enumerate() {
            if !v.is_finite() {
                items.push(format!("{tag}: tau_hat[{i}] = {v} is not finite"));
            }
        }
    }

    if items.is_empty() {
        Ok(ValidationReport {
            n,
            p: data.x.ncols(),
            n_agents: agents.len(),
            treated_fraction: n_treated as f64 / n as f64,
        })
    } else {
        Err(Error::validation(items))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (ObservedData, Vec<AgentPosterior>) {
        let data = ObservedData {
            y: vec![1.0, 2.0, 3.0, 4.0],
            t: vec![0, 1, 0, 1],
            x: DMatrix::from_row_slice(4, 2, &[0.0, 0.1, 1.0, -0.2, 0.5, 0.3, -1.0, 0.8]),
            pi: Some(vec![0.5, 0.4, 0.6, 0.5]),
        };
        let agents = vec![
            AgentPosterior::new(0, vec![1.0; 4], vec![0.5; 4]),
            AgentPosterior::new(1, vec![0.5; 4], vec![0.2; 4]),
        ];
        (data, agents)
    }

    #[test]
    fn consistent_toy_dataset_passes() {
        let (data, agents) = toy();
        let report = validate_dataset(&data, &agents).unwrap();
        assert_eq!(report.n, 4);
        assert_eq!(report.p, 2);
        assert_eq!(report.n_agents, 2);
        assert!((report.treated_fraction - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_arm_rejected() {
        let (mut data, agents) = toy();
        data.t = vec![1, 1, 1, 1];
        let err = validate_dataset(&data, &agents).unwrap_err();
        assert!(err.to_string().contains("both treatment arms required"));
    }

    #[test]
    fn zero_se_rejected() {
        let (data, mut agents) = toy();
        agents[1].se[2] = 0.0;
        let err = validate_dataset(&data, &agents).unwrap_err();
        assert!(err.to_string().contains("nonpositive standard error"));
    }

    #[test]
    fn sub_floor_se_rejected() {
        let (data, mut agents) = toy();
        agents[0].se[0] = 1e-9;
        assert!(validate_dataset(&data, &agents).is_err());
    }

    #[test]
    fn pi_outside_open_interval_rejected() {
        let (mut data, agents) = toy();
        data.pi = Some(vec![0.5, 1.0, 0.5, 0.5]);
        assert!(validate_dataset(&data, &agents).is_err());
    }

    #[test]
    fn settings_burnin_must_precede_end() {
        let s = SamplerSettings {
            n_iter: 100,
            n_burn: 100,
            ..SamplerSettings::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn retained_count_matches_settings() {
        let s = SamplerSettings {
            n_iter: 2000,
            n_burn: 500,
            thin: 1,
            ..SamplerSettings::default()
        };
        assert_eq!(s.n_retained(), 1500);
    }

    #[test]
    fn default_priors_equal_weight() {
        let (data, _) = toy();
        let z = data.x.clone();
        let p = Priors::default_for(&data, &z, 2);
        assert_eq!(p.bar_beta, vec![0.0, 0.5, 0.5]);
        assert!((p.bar_mu - 2.0).abs() < 1e-15); // mean of y over controls: (1+3)/2
        p.validate().unwrap();
        let (lo, hi) = p.phi_bounds_beta;
        assert!(0.0 < lo && lo < hi);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        #[derive(Debug, Clone)]
        enum Mutation {
            None,
            SingleArm,
            TreatmentOutOfRange { row: usize },
            ZeroSe { agent: usize, row: usize },
            SubFloorSe { agent: usize, row: usize },
            PiAtBoundary { row: usize },
            AgentLengthMismatch { agent: usize },
            NonFiniteOutcome { row: usize },
        }

        fn mutation_strategy() -> impl Strategy<Value = Mutation> {
            prop_oneof![
                Just(Mutation::None),
                Just(Mutation::SingleArm),
                (0usize..6).prop_map(|row| Mutation::TreatmentOutOfRange { row }),
                ((0usize..2), (0usize..6)).prop_map(|(agent, row)| Mutation::ZeroSe { agent, row }),
                ((0usize..2), (0usize..6))
                    .prop_map(|(agent, row)| Mutation::SubFloorSe { agent, row }),
                (0usize..6).prop_map(|row| Mutation::PiAtBoundary { row }),
                (0usize..2).prop_map(|agent| Mutation::AgentLengthMismatch { agent }),
                (0usize..6).prop_map(|row| Mutation::NonFiniteOutcome { row }),
            ]
        }

        proptest! {
            /// The validator accepts exactly the datasets satisfying every
            /// type invariant: the unmutated base always passes, every
            /// mutation below breaks exactly one invariant and must fail.
            #[test]
            fn accepts_iff_invariants_hold(mutation in mutation_strategy(), seed in 0u64..1000) {
                let mut rng = crate::rngutil::root(seed);
                use rand::Rng;
                let n = 6;
                let mut data = ObservedData {
                    y: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                    t: (0..n).map(|i| (i % 2) as u8).collect(),
                    x: DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0)),
                    pi: Some((0..n).map(|_| rng.gen_range(0.05..0.95)).collect()),
                };
                let mut agents = vec![
                    AgentPosterior::new(0, vec![0.5; n], (0..n).map(|_| rng.gen_range(0.1..2.0)).collect()),
                    AgentPosterior::new(1, vec![-0.5; n], (0..n).map(|_| rng.gen_range(0.1..2.0)).collect()),
                ];
                let expect_ok = matches!(mutation, Mutation::None);
                match mutation {
                    Mutation::None => {}
                    Mutation::SingleArm => data.t = vec![1; n],
                    Mutation::TreatmentOutOfRange { row } => data.t[row] = 2,
                    Mutation::ZeroSe { agent, row } => agents[agent].se[row] = 0.0,
                    Mutation::SubFloorSe { agent, row } => agents[agent].se[row] = 1e-9,
                    Mutation::PiAtBoundary { row } => data.pi.as_mut().unwrap()[row] = 1.0,
                    Mutation::AgentLengthMismatch { agent } => {
                        agents[agent].tau_hat.pop();
                    }
                    Mutation::NonFiniteOutcome { row } => data.y[row] = f64::NAN,
                }
                prop_assert_eq!(validate_dataset(&data, &agents).is_ok(), expect_ok);
            }
        }
    }
}
