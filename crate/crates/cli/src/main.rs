//! Command-line interface: dataset ingestion, agent fitting, synthesis,
//! prediction from a persisted chain, scenario benchmarking, and the
//! numerical self-check suite.
//!
//! Every failure prints a single-line machine-readable JSON diagnostic to
//! standard error and exits nonzero: 2 for input/config problems, 3 for
//! prediction inputs inconsistent with the trained chain, 1 otherwise.

mod validate;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use std::path::PathBuf;
use std::process::ExitCode;

use bcs_core::agents::{
    default_k, fit_additive_agent, fit_knn_agent, fit_linear_agent, FittedAgent,
};
use bcs_core::data::{validate_dataset, AgentPosterior, SamplerSettings};
use bcs_core::encode::encode_with_report;
use bcs_core::error::Error;
use bcs_core::io;
use bcs_core::predict::predict_tau_at;
use bcs_core::rngutil;
use bcs_core::sampler::run_chain;
use bcs_core::simbench::{run_replications, tau_summaries, RosterConfig, RunConfig};

#[derive(Parser)]
#[command(
    name = "bcs",
    about = "Bayesian causal synthesis of heterogeneous treatment effect estimators",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the synthesis model to a dataset and write posterior summaries
    /// plus a reusable chain directory.
    Synthesize(SynthesizeArgs),
    /// Posterior treatment-effect inference at new points from a persisted
    /// chain.
    Predict(PredictArgs),
    /// Run a synthetic-scenario Monte Carlo benchmark.
    Simulate(SimulateArgs),
    /// Run the numerical self-check suite (dense-GP equivalence,
    /// Schur-complement conditioning, variance-draw distribution, and the
    /// joint-distribution sampler test).
    Validate(ValidateArgs),
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Data CSV: columns y, t, optional propensity, covariates.
    #[arg(long)]
    data: PathBuf,
    /// Plug-in agent CSV (tau_hat_1, se_1, ...); alternative to --fit-agents.
    #[arg(long)]
    agents: Option<PathBuf>,
    /// Comma-separated built-in agents to fit: lm, am, knn.
    #[arg(long, value_delimiter = ',')]
    fit_agents: Vec<String>,
    /// Name of the propensity column in the data file.
    #[arg(long)]
    pi_column: Option<String>,
    /// TOML file with `[sampler]` (and agent) settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "bcs_out")]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Chain directory written by a synthesize run.
    #[arg(long)]
    chain: PathBuf,
    /// Prediction points CSV: training covariate columns plus per-agent
    /// tau_hat_j, se_j columns.
    #[arg(long)]
    points: PathBuf,
    /// Output CSV path.
    #[arg(long, default_value = "predictions.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario configuration file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Output directory for report.csv and report.json.
    #[arg(long, default_value = "bcs_report")]
    out: PathBuf,
}

#[derive(Args)]
struct ValidateArgs {
    /// Corrupt the observation-noise step to demonstrate that the
    /// joint-distribution test catches a broken sampler (self-test fixture;
    /// makes the run fail).
    #[arg(long)]
    mutate_sigma2: bool,
    /// Draws for the joint-distribution test.
    #[arg(long, default_value_t = 5000)]
    geweke_draws: usize,
}

/// Exit codes: input/config errors 2, chain/prediction mismatches 3,
/// everything else 1.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Validation { .. } | Error::Config(_) | Error::Encoding(_) | Error::Csv(_) => 2,
        Error::Prediction(_) => 3,
        _ => 1,
    }
}

fn fail(err: Error) -> ExitCode {
    let code = exit_code_for(&err);
    let msg = serde_json::json!({ "error": err.to_string(), "exit_code": code });
    eprintln!("{msg}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("BCS_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprintln!("{e}");
            let msg = serde_json::json!({ "error": e.to_string(), "exit_code": 2 });
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Synthesize(args) => cmd_synthesize(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Validate(args) => validate::cmd_validate(args.mutate_sigma2, args.geweke_draws),
    };
    match result {
        Ok(code) => code,
        Err(e) => fail(e),
    }
}

/// Optional synthesize-side config file: sampler settings plus built-in
/// agent knobs.
#[derive(Debug, Default, Deserialize)]
struct SynthConfig {
    #[serde(default)]
    sampler: Option<SamplerSettings>,
    #[serde(default)]
    roster: Option<RosterConfig>,
}

fn cmd_synthesize(args: SynthesizeArgs) -> Result<ExitCode, Error> {
    let config: SynthConfig = match &args.config {
        Some(path) => toml::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        None => SynthConfig::default(),
    };
    let mut settings = config.sampler.unwrap_or_default();
    if let Some(seed) = args.seed {
        settings.seed = seed;
    }
    let roster = config.roster.unwrap_or_default();

    let data_file = io::read_data_csv(&args.data, args.pi_column.as_deref())?;
    let (data, encoding) = data_file.encode()?;

    let agents: Vec<AgentPosterior> = if let Some(agents_path) = &args.agents {
        if !args.fit_agents.is_empty() {
            return Err(Error::Config(
                "--agents and --fit-agents are mutually exclusive".to_string(),
            ));
        }
        io::read_agents_csv(agents_path)?
    } else {
        let names = if args.fit_agents.is_empty() {
            vec!["lm".to_string(), "am".to_string(), "knn".to_string()]
        } else {
            args.fit_agents.clone()
        };
        let mut agents = Vec::with_capacity(names.len());
        for (j, name) in names.iter().enumerate() {
            let fitted: Box<dyn FittedAgent> = match name.as_str() {
                "lm" => Box::new(fit_linear_agent(&data)?),
                "am" => Box::new(fit_additive_agent(
                    &data,
                    roster.am_bootstrap_reps,
                    settings.seed ^ 0x5eed,
                )?),
                "knn" => Box::new(fit_knn_agent(
                    &data,
                    default_k(data.n()),
                    roster.knn_subsample_reps,
                    settings.seed ^ 0xca75,
                )?),
                other => {
                    return Err(Error::Config(format!(
                        "unknown agent '{other}' (expected lm, am, knn)"
                    )))
                }
            };
            agents.push(fitted.posterior(j));
        }
        agents
    };

    let report = validate_dataset(&data, &agents)?;
    eprintln!(
        "n = {}, p = {} encoded columns, J = {} agents, treated fraction {:.3}",
        report.n, report.p, report.n_agents, report.treated_fraction
    );

    let output = run_chain(&data, &agents, None, &settings)?;

    std::fs::create_dir_all(&args.out)?;
    io::write_tau_summary(
        &args.out.join("tau_summary.csv"),
        &tau_summaries(&output.draws.tau),
    )?;
    io::write_coefficients(&args.out.join("coefficients.csv"), &output.draws, data.n())?;
    io::write_diagnostics(&args.out.join("chain_diagnostics.json"), &output.diagnostics)?;
    io::save_chain(&args.out, &output, &data.x, &encoding)?;
    eprintln!(
        "retained {} draws; outputs in {}",
        output.draws.n_draws(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(args: PredictArgs) -> Result<ExitCode, Error> {
    let bundle = io::load_chain(&args.chain)?;
    let points = io::read_points_csv(&args.points, bundle.n_agents)?;
    let x_new = encode_with_report(&bundle.encoding, &points.table).map_err(|e| {
        Error::Prediction(format!("points do not match the training encoding: {e}"))
    })?;

    let mut rng = rngutil::substream(bundle.settings.seed, 999_001);
    let mut rows = Vec::with_capacity(x_new.nrows());
    for i in 0..x_new.nrows() {
        let row: Vec<f64> = x_new.row(i).iter().copied().collect();
        let pred = predict_tau_at(
            &row,
            &points.agent_values[i],
            &bundle.draws,
            &bundle.priors,
            &bundle.x_train,
            bundle.settings.m,
            &mut rng,
        )?;
        rows.push(pred);
    }

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(&args.out).map_err(Error::Csv)?;
    w.write_record(["mean", "lo95", "hi95"]).map_err(Error::Csv)?;
    for pred in &rows {
        w.write_record([
            pred.mean.to_string(),
            pred.lo95.to_string(),
            pred.hi95.to_string(),
        ])
        .map_err(Error::Csv)?;
    }
    w.flush()?;
    eprintln!("wrote {} predictions to {}", rows.len(), args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode, Error> {
    let text = std::fs::read_to_string(&args.scenario)
        .map_err(|e| Error::Config(format!("{}: {e}", args.scenario.display())))?;
    let config = RunConfig::from_toml(&text)?;
    let report = run_replications(&config.scenario, &config.roster, &config.sampler)?;

    std::fs::create_dir_all(&args.out)?;
    io::write_report_csv(&args.out.join("report.csv"), &report)?;
    std::fs::write(
        args.out.join("report.json"),
        serde_json::to_vec_pretty(&report).map_err(Error::Json)?,
    )?;
    for row in &report.rows {
        eprintln!(
            "{:>4}: mse {:.4}  rmse {:.4}  cp {}  al {}",
            row.method,
            row.mse,
            row.rmse,
            row.cp
                .map(|v| format!("{v:.1}%"))
                .unwrap_or_else(|| "-".to_string()),
            row.al
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".to_string()),
        );
    }
    if !report.failures.is_empty() {
        eprintln!(
            "warning: {} of {} replicates failed",
            report.failures.len(),
            report.replications
        );
    }
    eprintln!(
        "completed {}/{} replicates in {:.1}s; report in {}",
        report.completed,
        report.replications,
        report.wall_clock_secs,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}
