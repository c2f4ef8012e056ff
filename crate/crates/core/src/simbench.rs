//! Synthetic scenario generators, evaluation metrics, and the Monte Carlo
//! replication runner.
//!
//! The generator draws covariates with one dichotomous column and one
//! three-level categorical column, assigns treatment at random with
//! probability one half (so the propensity is known and passed through),
//! and builds outcomes from one of two prognostic forms crossed with one of
//! two effect forms. The categorical column enters the generating formulas
//! as its numeric level but enters every fitted model one-hot encoded.

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::agents::{
    default_k, fit_additive_agent, fit_knn_agent, fit_linear_agent, FittedAgent,
};
use crate::data::{AgentPosterior, ObservedData, SamplerSettings};
use crate::encode::{encode_covariates, encode_with_report, ColumnValues, RawColumn, RawTable};
use crate::error::{Error, Result};
use crate::predict::{predict_tau_at, quantile_sorted, summarize};
use crate::rngutil;
use crate::sampler::run_chain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MuForm {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TauForm {
    A,
    B,
}

fn default_sigma2() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub mu_form: MuForm,
    pub tau_form: TauForm,
    pub n: usize,
    pub p: usize,
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
    #[serde(default)]
    pub n_test: Option<usize>,
    pub replications: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let mut items = Vec::new();
        if self.p < 5 {
            items.push(format!(
                "p must be >= 5 (the generating formulas reference x2, x3, x5), got {}",
                self.p
            ));
        }
        if self.n < 10 {
            items.push(format!("n must be >= 10, got {}", self.n));
        }
        if self.replications == 0 {
            items.push("replications must be >= 1".to_string());
        }
        if self.sigma2 <= 0.0 {
            items.push(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        if let Some(nt) = self.n_test {
            if nt == 0 {
                items.push("n_test, when given, must be >= 1".to_string());
            }
        }
        if items.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(items.join("; ")))
        }
    }
}

/// One generated replicate: raw covariate table, outcomes, treatments, the
/// known randomization propensity, and the true effects.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub table: RawTable,
    pub y: Vec<f64>,
    pub t: Vec<u8>,
    pub pi: Vec<f64>,
    pub tau_true: Vec<f64>,
    pub test: Option<(RawTable, Vec<f64>)>,
}

fn mu_value(form: MuForm, x3: f64, x5: f64) -> f64 {
    match form {
        MuForm::A => -7.0 + 6.0 * x3.abs() - 3.0 * x5,
        MuForm::B => 2.0 + 2.0 * (3.0 * x3).sin(),
    }
}

fn tau_value(form: TauForm, x2: f64, x3: f64, x5: f64) -> f64 {
    match form {
        TauForm::A => 1.0 + 2.0 * x2 * x5,
        TauForm::B => 1.0 + 2.0 * x2 * x5 + x3 * x3 / 2.0,
    }
}

/// Draws one table of `rows` covariate vectors and the implied truths.
fn draw_block(
    cfg: &ScenarioConfig,
    rows: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> (RawTable, Vec<f64>, Vec<f64>) {
    use rand_distr::StandardNormal;
    let p = cfg.p;
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(rows); p];
    let mut cat5: Vec<String> = Vec::with_capacity(rows);
    let mut mu = Vec::with_capacity(rows);
    let mut tau = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut x = vec![0.0; p];
        for (k, xk) in x.iter_mut().enumerate() {
            match k {
                3 => *xk = rng.gen_bool(0.5) as u64 as f64,
                4 => *xk = rng.gen_range(1..=3) as f64,
                _ => *xk = rng.sample::<f64, _>(StandardNormal),
            }
        }
        mu.push(mu_value(cfg.mu_form, x[2], x[4]));
        tau.push(tau_value(cfg.tau_form, x[1], x[2], x[4]));
        cat5.push(format!("{}", x[4] as i64));
        for k in 0..p {
            cols[k].push(x[k]);
        }
    }
    let columns = (0..p)
        .map(|k| {
            let name = format!("x{}", k + 1);
            let values = match k {
                3 => ColumnValues::Binary(cols[k].iter().map(|&v| v as u8).collect()),
                4 => ColumnValues::Categorical(cat5.clone()),
                _ => ColumnValues::Continuous(cols[k].clone()),
            };
            RawColumn { name, values }
        })
        .collect();
    (RawTable { columns }, mu, tau)
}

/// Generates replicate `rep` of the scenario; deterministic in
/// `(cfg.seed, rep)`.
pub fn generate_scenario(cfg: &ScenarioConfig, rep: u64) -> Result<GeneratedData> {
    cfg.validate()?;
    use rand_distr::StandardNormal;
    let mut rng = rngutil::substream(cfg.seed, rep);
    let (table, mu, tau_true) = draw_block(cfg, cfg.n, &mut rng);
    let t: Vec<u8> = (0..cfg.n).map(|_| rng.gen_bool(0.5) as u8).collect();
    let y: Vec<f64> = (0..cfg.n)
        .map(|i| {
            mu[i] + tau_true[i] * t[i] as f64
                + cfg.sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let test = match cfg.n_test {
        Some(nt) => {
            let (table_t, _, tau_t) = draw_block(cfg, nt, &mut rng);
            Some((table_t, tau_t))
        }
        None => None,
    };
    Ok(GeneratedData {
        table,
        y,
        t,
        pi: vec![0.5; cfg.n],
        tau_true,
        test,
    })
}

// ---------------------------------------------------------------------------
// metrics

/// Point and interval metrics for one method on one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub mse: f64,
    /// Coverage of the supplied 95% intervals, in percent.
    pub cp: Option<f64>,
    /// Mean interval length.
    pub al: Option<f64>,
}

pub fn evaluate(
    tau_hat: &[f64],
    intervals: Option<(&[f64], &[f64])>,
    tau_true: &[f64],
) -> Result<EvalRow> {
    let n = tau_true.len();
    if tau_hat.len() != n {
        return Err(Error::Config(format!(
            "estimate length {} does not match truth length {n}",
            tau_hat.len()
        )));
    }
    let mse = tau_hat
        .iter()
        .zip(tau_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n as f64;
    let (cp, al) = match intervals {
        Some((lo, hi)) => {
            if lo.len() != n || hi.len() != n {
                return Err(Error::Config("interval lengths do not match truth".to_string()));
            }
            let covered = (0..n)
                .filter(|&i| lo[i] <= tau_true[i] && tau_true[i] <= hi[i])
                .count();
            let al = (0..n).map(|i| hi[i] - lo[i]).sum::<f64>() / n as f64;
            (Some(100.0 * covered as f64 / n as f64), Some(al))
        }
        None => (None, None),
    };
    Ok(EvalRow { mse, cp, al })
}

// ---------------------------------------------------------------------------
// replication runner

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Lm,
    Am,
    Knn,
    Bcs,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Lm => "LM",
            Method::Am => "AM",
            Method::Knn => "kNN",
            Method::Bcs => "BCS",
        }
    }
}

fn default_am_reps() -> usize {
    200
}

fn default_knn_reps() -> usize {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RosterConfig {
    pub methods: Vec<Method>,
    #[serde(default = "default_am_reps")]
    pub am_bootstrap_reps: usize,
    #[serde(default = "default_knn_reps")]
    pub knn_subsample_reps: usize,
}

impl Default for RosterConfig {
    fn default() -> Self {
        RosterConfig {
            methods: vec![Method::Lm, Method::Am, Method::Knn, Method::Bcs],
            am_bootstrap_reps: default_am_reps(),
            knn_subsample_reps: default_knn_reps(),
        }
    }
}

/// Aggregated metrics for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    /// Mean per-replicate MSE.
    pub mse: f64,
    /// Square root of the replication-pooled MSE.
    pub rmse: f64,
    pub cp: Option<f64>,
    pub al: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<MethodReport>,
    pub replications: usize,
    pub completed: usize,
    /// Messages from failed replicates; empty on a complete run.
    pub failures: Vec<String>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Full simulate-run configuration, the on-disk config file shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub sampler: SamplerSettings,
    #[serde(default)]
    pub roster: RosterConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// One replicate's evaluation rows in roster order.
fn run_one_replicate(
    cfg: &ScenarioConfig,
    roster: &RosterConfig,
    settings: &SamplerSettings,
    rep: u64,
) -> Result<Vec<(Method, EvalRow)>> {
    let gen = generate_scenario(cfg, rep)?;
    let (x, report) = encode_covariates(&gen.table)?;
    let data = ObservedData {
        y: gen.y.clone(),
        t: gen.t.clone(),
        x,
        pi: Some(gen.pi.clone()),
    };
    let test = match &gen.test {
        Some((table, tau_t)) => Some((encode_with_report(&report, table)?, tau_t.clone())),
        None => None,
    };

    // chain seed derived once per replicate
    let chain_seed: u64 = rngutil::substream(cfg.seed, 1_000_000 + rep).gen();

    let mut fitted: Vec<(Method, Box<dyn FittedAgent>)> = Vec::new();
    for &method in &roster.methods {
        match method {
            Method::Lm => fitted.push((Method::Lm, Box::new(fit_linear_agent(&data)?))),
            Method::Am => fitted.push((
                Method::Am,
                Box::new(fit_additive_agent(&data, roster.am_bootstrap_reps, chain_seed ^ 0x5eed)?),
            )),
            Method::Knn => fitted.push((
                Method::Knn,
                Box::new(fit_knn_agent(
                    &data,
                    default_k(cfg.n),
                    roster.knn_subsample_reps,
                    chain_seed ^ 0xca75,
                )?),
            )),
            Method::Bcs => {}
        }
    }

    let eval_truth: &[f64] = match &test {
        Some((_, tau_t)) => tau_t,
        None => &gen.tau_true,
    };
    let eval_x: Option<&DMatrix<f64>> = test.as_ref().map(|(x, _)| x);

    let mut rows: Vec<(Method, EvalRow)> = Vec::new();
    for (method, agent) in &fitted {
        let (tau_hat, se): (Vec<f64>, Vec<f64>) = match eval_x {
            None => (agent.train_tau().to_vec(), agent.train_se().to_vec()),
            Some(xt) => {
                let mut tau = Vec::with_capacity(xt.nrows());
                let mut se = Vec::with_capacity(xt.nrows());
                for i in 0..xt.nrows() {
                    let row: Vec<f64> = xt.row(i).iter().copied().collect();
                    let (t, s) = agent.tau_se_at(&row);
                    tau.push(t);
                    se.push(s);
                }
                (tau, se)
            }
        };
        let lo: Vec<f64> = tau_hat.iter().zip(&se).map(|(t, s)| t - 1.96 * s).collect();
        let hi: Vec<f64> = tau_hat.iter().zip(&se).map(|(t, s)| t + 1.96 * s).collect();
        rows.push((*method, evaluate(&tau_hat, Some((&lo, &hi)), eval_truth)?));
    }

    if roster.methods.contains(&Method::Bcs) {
        if fitted.is_empty() {
            return Err(Error::Config(
                "synthesis requires at least one base method in the roster".to_string(),
            ));
        }
        let agents: Vec<AgentPosterior> = fitted
            .iter()
            .enumerate()
            .map(|(j, (_, agent))| agent.posterior(j))
            .collect();
        let mut chain_settings = settings.clone();
        chain_settings.seed = chain_seed;
        let out = run_chain(&data, &agents, None, &chain_settings)?;

        let row = match eval_x {
            None => {
                let n = data.n();
                let n_draws = out.draws.n_draws();
                let mut tau_hat = Vec::with_capacity(n);
                let mut lo = Vec::with_capacity(n);
                let mut hi = Vec::with_capacity(n);
                for i in 0..n {
                    let mut col: Vec<f64> =
                        (0..n_draws).map(|d| out.draws.tau[(d, i)]).collect();
                    tau_hat.push(col.iter().sum::<f64>() / n_draws as f64);
                    col.sort_by(f64::total_cmp);
                    lo.push(quantile_sorted(&col, 0.025));
                    hi.push(quantile_sorted(&col, 0.975));
                }
                evaluate(&tau_hat, Some((&lo, &hi)), eval_truth)?
            }
            Some(xt) => {
                let mut rng = rngutil::substream(chain_seed, 424_242);
                let mut tau_hat = Vec::with_capacity(xt.nrows());
                let mut lo = Vec::with_capacity(xt.nrows());
                let mut hi = Vec::with_capacity(xt.nrows());
                for i in 0..xt.nrows() {
                    let row: Vec<f64> = xt.row(i).iter().copied().collect();
                    let agent_vals: Vec<(f64, f64)> =
                        fitted.iter().map(|(_, a)| a.tau_se_at(&row)).collect();
                    let pred = predict_tau_at(
                        &row,
                        &agent_vals,
                        &out.draws,
                        &out.priors,
                        &data.x,
                        chain_settings.m,
                        &mut rng,
                    )?;
                    tau_hat.push(pred.mean);
                    lo.push(pred.lo95);
                    hi.push(pred.hi95);
                }
                evaluate(&tau_hat, Some((&lo, &hi)), eval_truth)?
            }
        };
        rows.push((Method::Bcs, row));
    }
    Ok(rows)
}

/// Runs every replicate (concurrently, each on its own RNG stream) and
/// aggregates the per-method metrics.
pub fn run_replications(
    cfg: &ScenarioConfig,
    roster: &RosterConfig,
    settings: &SamplerSettings,
) -> Result<EvalReport> {
    cfg.validate()?;
    settings.validate()?;
    if roster.methods.is_empty() {
        return Err(Error::Config("method roster is empty".to_string()));
    }
    let start = Instant::now();

    type RepResult = (u64, Result<Vec<(Method, EvalRow)>>);
    let results: Vec<RepResult> = (0..cfg.replications as u64)
        .into_par_iter()
        .map(|rep| (rep, run_one_replicate(cfg, roster, settings, rep)))
        .collect();

    let mut failures = Vec::new();
    let mut per_method: Vec<(Method, Vec<EvalRow>)> = Vec::new();
    let mut completed = 0usize;
    for (rep, result) in results {
        match result {
            Ok(rows) => {
                completed += 1;
                for (method, row) in rows {
                    match per_method.iter_mut().find(|(m, _)| *m == method) {
                        Some((_, acc)) => acc.push(row),
                        None => per_method.push((method, vec![row])),
                    }
                }
            }
            Err(e) => failures.push(format!("replicate {rep}: {e}")),
        }
    }
    if completed == 0 {
        return Err(Error::Config(format!(
            "every replicate failed; first failure: {}",
            failures.first().cloned().unwrap_or_default()
        )));
    }

    let rows = per_method
        .into_iter()
        .map(|(method, rows)| {
            let k = rows.len() as f64;
            let mse = rows.iter().map(|r| r.mse).sum::<f64>() / k;
            let cp = rows
                .iter()
                .map(|r| r.cp)
                .collect::<Option<Vec<_>>>()
                .map(|v| v.iter().sum::<f64>() / k);
            let al = rows
                .iter()
                .map(|r| r.al)
                .collect::<Option<Vec<_>>>()
                .map(|v| v.iter().sum::<f64>() / k);
            MethodReport {
                method: method.name().to_string(),
                mse,
                rmse: mse.sqrt(),
                cp,
                al,
            }
        })
        .collect();

    Ok(EvalReport {
        rows,
        replications: cfg.replications,
        completed,
        failures,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// In-sample posterior summary of one chain's treatment-effect draws,
/// per training row: `(mean, sd, lo95, hi95)`.
pub fn tau_summaries(tau: &DMatrix<f64>) -> Vec<(f64, f64, f64, f64)> {
    let (n_draws, n) = (tau.nrows(), tau.ncols());
    (0..n)
        .map(|i| {
            let col: Vec<f64> = (0..n_draws).map(|d| tau[(d, i)]).collect();
            let s = summarize(col);
            (s.mean, s.sd, s.lo95, s.hi95)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn desk_cfg() -> ScenarioConfig {
        ScenarioConfig {
            mu_form: MuForm::A,
            tau_form: TauForm::A,
            n: 60,
            p: 5,
            sigma2: 1.0,
            n_test: None,
            replications: 1,
            seed: 9,
        }
    }

    #[test]
    fn formula_substitutions() {
        // tau form A at x2 = 1, x5 = 2
        assert_relative_eq!(tau_value(TauForm::A, 1.0, 0.0, 2.0), 5.0, epsilon = 1e-15);
        // mu form B at x3 = 0
        assert_relative_eq!(mu_value(MuForm::B, 0.0, 1.0), 2.0, epsilon = 1e-15);
        // mu form A: -7 + 6|x3| - 3 x5
        assert_relative_eq!(mu_value(MuForm::A, -2.0, 3.0), -4.0, epsilon = 1e-15);
        // tau form B adds x3^2/2
        assert_relative_eq!(tau_value(TauForm::B, 1.0, 2.0, 2.0), 7.0, epsilon = 1e-15);
    }

    #[test]
    fn treatment_assignment_is_balanced() {
        let cfg = ScenarioConfig {
            n: 100_000,
            ..desk_cfg()
        };
        let gen = generate_scenario(&cfg, 0).unwrap();
        let frac = gen.t.iter().map(|&t| t as f64).sum::<f64>() / cfg.n as f64;
        assert!((frac - 0.5).abs() < 0.005, "treated fraction {frac}");
    }

    #[test]
    fn generator_is_deterministic_per_replicate() {
        let cfg = desk_cfg();
        let a = generate_scenario(&cfg, 3).unwrap();
        let b = generate_scenario(&cfg, 3).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.t, b.t);
        assert_eq!(a.tau_true, b.tau_true);
        let c = generate_scenario(&cfg, 4).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn small_p_rejected() {
        let cfg = ScenarioConfig { p: 4, ..desk_cfg() };
        assert!(generate_scenario(&cfg, 0).is_err());
    }

    #[test]
    fn evaluate_arithmetic() {
        // exact estimates: zero MSE, full coverage with degenerate intervals
        let truth = [0.0, 1.0];
        let row = evaluate(&[0.0, 1.0], Some((&[0.0, 1.0], &[0.0, 1.0])), &truth).unwrap();
        assert_eq!(row.mse, 0.0);
        assert_eq!(row.cp, Some(100.0));
        assert_eq!(row.al, Some(0.0));

        let row = evaluate(&[1.0, 3.0], None, &[0.0, 1.0]).unwrap();
        assert_relative_eq!(row.mse, 2.5, epsilon = 1e-15);

        let row = evaluate(
            &[0.0, 0.0],
            Some((&[-1.0, 0.0], &[1.0, 2.0])),
            &[0.0, 5.0],
        )
        .unwrap();
        assert_eq!(row.cp, Some(50.0));
        assert_eq!(row.al, Some(2.0));
    }

    #[test]
    fn evaluate_rejects_misaligned_lengths() {
        assert!(evaluate(&[0.0], None, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn smoke_replication_run_emits_all_rows() {
        let cfg = ScenarioConfig {
            n: 50,
            replications: 1,
            ..desk_cfg()
        };
        let roster = RosterConfig {
            methods: vec![Method::Lm, Method::Am, Method::Knn, Method::Bcs],
            am_bootstrap_reps: 30,
            knn_subsample_reps: 30,
        };
        let settings = SamplerSettings {
            m: 5,
            n_iter: 120,
            n_burn: 40,
            ..SamplerSettings::default()
        };
        let report = run_replications(&cfg, &roster, &settings).unwrap();
        assert_eq!(report.rows.len(), 4);
        assert_eq!(report.completed, 1);
        assert!(report.failures.is_empty());
        for row in &report.rows {
            assert!(row.mse.is_finite() && row.mse >= 0.0);
            assert_relative_eq!(row.rmse * row.rmse, row.mse, epsilon = 1e-12);
            let cp = row.cp.unwrap();
            assert!((0.0..=100.0).contains(&cp));
            assert!(row.al.unwrap() >= 0.0);
        }
    }

    #[test]
    fn replication_run_is_deterministic() {
        let cfg = ScenarioConfig {
            n: 40,
            replications: 2,
            ..desk_cfg()
        };
        let roster = RosterConfig {
            methods: vec![Method::Lm, Method::Bcs],
            am_bootstrap_reps: 10,
            knn_subsample_reps: 10,
        };
        let settings = SamplerSettings {
            m: 4,
            n_iter: 80,
            n_burn: 30,
            ..SamplerSettings::default()
        };
        let a = run_replications(&cfg, &roster, &settings).unwrap();
        let b = run_replications(&cfg, &roster, &settings).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn run_config_round_trips_through_toml() {
        let text = r#"
[scenario]
mu_form = "A"
tau_form = "B"
n = 300
p = 5
replications = 20
seed = 7

[sampler]
m = 15
n_iter = 2000
n_burn = 500
thin = 1
seed = 0

[roster]
methods = ["lm", "am", "knn", "bcs"]
"#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.scenario.n, 300);
        assert_eq!(cfg.scenario.sigma2, 1.0);
        assert_eq!(cfg.roster.am_bootstrap_reps, 200);
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back.scenario.n, 300);
    }

    #[test]
    fn bad_config_reports_field() {
        let err = RunConfig::from_toml("[scenario]\nmu_form = \"Z\"\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("mu_form") || msg.contains("unknown variant"), "{msg}");
    }
}
