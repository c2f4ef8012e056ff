//! CSV ingestion/emission and chain persistence.
//!
//! Data file: header row, columns `y`, `t`, optionally a propensity column
//! (named `pi` or chosen by the caller), then covariate columns. Covariate
//! typing is inferred: a `cat:` header prefix forces a categorical column
//! (the prefix is stripped from the stored name); otherwise values that all
//! parse as 0/1 are binary, other fully numeric columns are continuous, and
//! anything non-numeric is categorical.
//!
//! Agent file: columns `tau_hat_1, se_1, ..., tau_hat_J, se_J`, row-aligned
//! with the data file. Prediction points file: the covariate columns (same
//! names and order as training) plus per-agent `tau_hat_j, se_j` columns.
//!
//! A fitted chain persists as a directory: `manifest.json` with settings,
//! priors, and the encoding report, plus flat little-endian f64 arrays for
//! the draws.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::data::{
    AgentPosterior, Hyperparams, LatentState, ObservedData, PosteriorDraws, Priors,
    SamplerSettings,
};
use crate::encode::{encode_covariates, ColumnValues, EncodingReport, RawColumn, RawTable};
use crate::error::{Error, Result};
use crate::sampler::{ChainDiagnostics, ChainOutput};

// ---------------------------------------------------------------------------
// CSV ingestion

/// Raw parse of the data file: the covariate table plus outcome, treatment,
/// and optional propensity columns.
pub struct DataFile {
    pub table: RawTable,
    pub y: Vec<f64>,
    pub t: Vec<u8>,
    pub pi: Option<Vec<f64>>,
}

impl DataFile {
    /// Encodes the covariates and assembles the observed dataset.
    pub fn encode(&self) -> Result<(ObservedData, EncodingReport)> {
        let (x, report) = encode_covariates(&self.table)?;
        Ok((
            ObservedData {
                y: self.y.clone(),
                t: self.t.clone(),
                x,
                pi: self.pi.clone(),
            },
            report,
        ))
    }
}

fn parse_cell(field: &str, file: &str, row: usize, col: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        Error::Encoding(format!(
            "{file}: row {row}, column '{col}': cannot parse '{field}' as a number"
        ))
    })
}

/// Reads the data CSV. `pi_column` names the propensity column; when `None`
/// a column literally named `pi` is used if present.
pub fn read_data_csv(path: &Path, pi_column: Option<&str>) -> Result<DataFile> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let file = path.display().to_string();

    let find = |name: &str| headers.iter().position(|h| h == name);
    let y_idx = find("y").ok_or_else(|| Error::Encoding(format!("{file}: missing column 'y'")))?;
    let t_idx = find("t").ok_or_else(|| Error::Encoding(format!("{file}: missing column 't'")))?;
    let pi_idx = match pi_column {
        Some(name) => Some(
            find(name)
                .ok_or_else(|| Error::Encoding(format!("{file}: missing column '{name}'")))?,
        ),
        None => find("pi"),
    };

    let mut rows: Vec<Vec<String>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows.push(record.iter().map(|s| s.to_string()).collect());
    }
    if rows.is_empty() {
        return Err(Error::Encoding(format!("{file}: no data rows")));
    }

    let mut y = Vec::with_capacity(rows.len());
    let mut t = Vec::with_capacity(rows.len());
    let mut pi = pi_idx.map(|_| Vec::with_capacity(rows.len()));
    for (r, row) in rows.iter().enumerate() {
        y.push(parse_cell(&row[y_idx], &file, r, "y")?);
        let tv = parse_cell(&row[t_idx], &file, r, "t")?;
        if tv != 0.0 && tv != 1.0 {
            return Err(Error::Encoding(format!(
                "{file}: row {r}: treatment must be 0 or 1, got {tv}"
            )));
        }
        t.push(tv as u8);
        if let (Some(pi), Some(idx)) = (&mut pi, pi_idx) {
            pi.push(parse_cell(&row[idx], &file, r, "pi")?);
        }
    }

    let mut columns = Vec::new();
    for (c, header) in headers.iter().enumerate() {
        if c == y_idx || c == t_idx || Some(c) == pi_idx {
            continue;
        }
        let cells: Vec<&str> = rows.iter().map(|row| row[c].trim()).collect();
        columns.push(infer_column(header, &cells));
    }
    Ok(DataFile {
        table: RawTable { columns },
        y,
        t,
        pi,
    })
}

/// Column typing rule shared by the data and prediction readers.
fn infer_column(header: &str, cells: &[&str]) -> RawColumn {
    if let Some(name) = header.strip_prefix("cat:") {
        return RawColumn {
            name: name.to_string(),
            values: ColumnValues::Categorical(cells.iter().map(|s| s.to_string()).collect()),
        };
    }
    let numeric: Option<Vec<f64>> = cells.iter().map(|s| s.parse::<f64>().ok()).collect();
    match numeric {
        Some(vals) => {
            if vals.iter().all(|&v| v == 0.0 || v == 1.0) {
                RawColumn {
                    name: header.to_string(),
                    values: ColumnValues::Binary(vals.iter().map(|&v| v as u8).collect()),
                }
            } else {
                RawColumn {
                    name: header.to_string(),
                    values: ColumnValues::Continuous(vals),
                }
            }
        }
        None => RawColumn {
            name: header.to_string(),
            values: ColumnValues::Categorical(cells.iter().map(|s| s.to_string()).collect()),
        },
    }
}

/// Reads the plug-in agent file: `tau_hat_1, se_1, ..., tau_hat_J, se_J`.
pub fn read_agents_csv(path: &Path) -> Result<Vec<AgentPosterior>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let file = path.display().to_string();

    let mut j = 0usize;
    let mut pairs = Vec::new();
    loop {
        let tau_name = format!("tau_hat_{}", j + 1);
        let se_name = format!("se_{}", j + 1);
        let tau_idx = headers.iter().position(|h| h == &tau_name);
        let se_idx = headers.iter().position(|h| h == &se_name);
        match (tau_idx, se_idx) {
            (Some(a), Some(b)) => pairs.push((a, b)),
            (None, None) => break,
            _ => {
                return Err(Error::Encoding(format!(
                    "{file}: columns '{tau_name}' and '{se_name}' must both be present"
                )))
            }
        }
        j += 1;
    }
    if pairs.is_empty() {
        return Err(Error::Encoding(format!(
            "{file}: no agent columns found (expected 'tau_hat_1', 'se_1', ...)"
        )));
    }

    let mut agents: Vec<AgentPosterior> = (0..pairs.len())
        .map(|j| AgentPosterior::new(j, Vec::new(), Vec::new()))
        .collect();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        for (j, &(ti, si)) in pairs.iter().enumerate() {
            agents[j]
                .tau_hat
                .push(parse_cell(&record[ti], &file, r, &format!("tau_hat_{}", j + 1))?);
            agents[j]
                .se
                .push(parse_cell(&record[si], &file, r, &format!("se_{}", j + 1))?);
        }
    }
    Ok(agents)
}

/// Prediction points file: covariate columns named as at training plus
/// per-agent `tau_hat_j, se_j` columns.
pub struct PointsFile {
    pub table: RawTable,
    /// Per row, per agent `(tau_hat, se)`.
    pub agent_values: Vec<Vec<(f64, f64)>>,
}

pub fn read_points_csv(path: &Path, n_agents: usize) -> Result<PointsFile> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let file = path.display().to_string();

    let mut agent_cols = Vec::with_capacity(n_agents);
    for j in 0..n_agents {
        let tau_name = format!("tau_hat_{}", j + 1);
        let se_name = format!("se_{}", j + 1);
        let ti = headers
            .iter()
            .position(|h| h == &tau_name)
            .ok_or_else(|| Error::Encoding(format!("{file}: missing column '{tau_name}'")))?;
        let si = headers
            .iter()
            .position(|h| h == &se_name)
            .ok_or_else(|| Error::Encoding(format!("{file}: missing column '{se_name}'")))?;
        agent_cols.push((ti, si));
    }
    let is_agent_col =
        |c: usize| agent_cols.iter().any(|&(ti, si)| c == ti || c == si);

    let mut rows: Vec<Vec<String>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        rows.push(record.iter().map(|s| s.to_string()).collect());
    }
    if rows.is_empty() {
        return Err(Error::Encoding(format!("{file}: no data rows")));
    }

    let mut agent_values = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let mut vals = Vec::with_capacity(n_agents);
        for (j, &(ti, si)) in agent_cols.iter().enumerate() {
            vals.push((
                parse_cell(&row[ti], &file, r, &format!("tau_hat_{}", j + 1))?,
                parse_cell(&row[si], &file, r, &format!("se_{}", j + 1))?,
            ));
        }
        agent_values.push(vals);
    }

    let mut columns = Vec::new();
    for (c, header) in headers.iter().enumerate() {
        if is_agent_col(c) {
            continue;
        }
        let cells: Vec<&str> = rows.iter().map(|row| row[c].trim()).collect();
        columns.push(infer_column(header, &cells));
    }
    Ok(PointsFile {
        table: RawTable { columns },
        agent_values,
    })
}

// ---------------------------------------------------------------------------
// CSV emission

/// Writes `tau_summary.csv`: per-row posterior mean, sd, and 95% bounds.
pub fn write_tau_summary(path: &Path, rows: &[(f64, f64, f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["mean", "sd", "lo95", "hi95"])?;
    for (mean, sd, lo, hi) in rows {
        w.write_record([
            mean.to_string(),
            sd.to_string(),
            lo.to_string(),
            hi.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `coefficients.csv`: posterior mean of each coefficient field at
/// each training row.
pub fn write_coefficients(path: &Path, draws: &PosteriorDraws, n: usize) -> Result<()> {
    let n_draws = draws.n_draws();
    let n_fields = draws
        .states
        .first()
        .map(|(s, _)| s.beta.ncols())
        .unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..n_fields).map(|j| format!("beta_{j}")).collect();
    w.write_record(&header)?;
    for i in 0..n {
        let mut record = Vec::with_capacity(n_fields);
        for j in 0..n_fields {
            let mean = draws
                .states
                .iter()
                .map(|(s, _)| s.beta[(i, j)])
                .sum::<f64>()
                / n_draws as f64;
            record.push(mean.to_string());
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the replication report as CSV, one row per method.
pub fn write_report_csv(path: &Path, report: &crate::simbench::EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "mse", "rmse", "cp", "al"])?;
    for row in &report.rows {
        w.write_record([
            row.method.clone(),
            row.mse.to_string(),
            row.rmse.to_string(),
            row.cp.map(|v| v.to_string()).unwrap_or_default(),
            row.al.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// chain persistence

#[derive(Debug, Serialize, Deserialize)]
struct ChainManifest {
    n: usize,
    p: usize,
    n_agents: usize,
    n_draws: usize,
    settings: SamplerSettings,
    priors: Priors,
    encoding: EncodingReport,
    pi: Vec<f64>,
    arrays: Vec<String>,
}

/// Everything needed to predict from a persisted chain.
pub struct ChainBundle {
    pub draws: PosteriorDraws,
    pub priors: Priors,
    pub settings: SamplerSettings,
    pub encoding: EncodingReport,
    pub x_train: DMatrix<f64>,
    pub n_agents: usize,
}

fn write_f64s(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != expected * 8 {
        return Err(Error::Prediction(format!(
            "{}: expected {} values, found {} bytes",
            path.display(),
            expected,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Persists a fitted chain so prediction can run without re-sampling.
pub fn save_chain(
    dir: &Path,
    output: &ChainOutput,
    x_train: &DMatrix<f64>,
    encoding: &EncodingReport,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let n = x_train.nrows();
    let p = x_train.ncols();
    let n_draws = output.draws.n_draws();
    let n_agents = output.priors.bar_beta.len() - 1;

    let manifest = ChainManifest {
        n,
        p,
        n_agents,
        n_draws,
        settings: output.settings.clone(),
        priors: output.priors.clone(),
        encoding: encoding.clone(),
        pi: output.pi.clone(),
        arrays: vec![
            "x_train.bin".to_string(),
            "mu.bin".to_string(),
            "beta.bin".to_string(),
            "f.bin".to_string(),
            "hyper.bin".to_string(),
            "tau.bin".to_string(),
        ],
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;

    write_f64s(
        &dir.join("x_train.bin"),
        (0..n).flat_map(|i| (0..p).map(move |c| (i, c))).map(|(i, c)| x_train[(i, c)]),
    )?;
    write_f64s(
        &dir.join("mu.bin"),
        output.draws.states.iter().flat_map(|(s, _)| s.mu.iter().copied()),
    )?;
    write_f64s(
        &dir.join("beta.bin"),
        output.draws.states.iter().flat_map(|(s, _)| {
            let jp1 = s.beta.ncols();
            (0..n).flat_map(move |i| (0..jp1).map(move |j| s.beta[(i, j)]))
        }),
    )?;
    write_f64s(
        &dir.join("f.bin"),
        output.draws.states.iter().flat_map(|(s, _)| {
            let jn = s.f.ncols();
            (0..n).flat_map(move |i| (0..jn).map(move |j| s.f[(i, j)]))
        }),
    )?;
    write_f64s(
        &dir.join("hyper.bin"),
        output.draws.states.iter().flat_map(|(_, h)| {
            let mut v = vec![h.sigma2, h.tau2_mu];
            v.extend(&h.tau2_beta);
            v.push(h.phi_mu);
            v.extend(&h.phi_beta);
            v
        }),
    )?;
    write_f64s(
        &dir.join("tau.bin"),
        (0..n_draws).flat_map(|d| (0..n).map(move |i| (d, i))).map(|(d, i)| output.draws.tau[(d, i)]),
    )?;
    Ok(())
}

/// Loads a chain directory written by [`save_chain`].
pub fn load_chain(dir: &Path) -> Result<ChainBundle> {
    let manifest_path = dir.join("manifest.json");
    let manifest: ChainManifest = serde_json::from_slice(&fs::read(&manifest_path).map_err(
        |e| Error::Prediction(format!("cannot read {}: {e}", manifest_path.display())),
    )?)?;
    let (n, p, n_draws) = (manifest.n, manifest.p, manifest.n_draws);
    let jp1 = manifest.n_agents + 1;

    let x_vals = read_f64s(&dir.join("x_train.bin"), n * p)?;
    let x_train = DMatrix::from_fn(n, p, |i, c| x_vals[i * p + c]);
    let mu_vals = read_f64s(&dir.join("mu.bin"), n_draws * n)?;
    let beta_vals = read_f64s(&dir.join("beta.bin"), n_draws * n * jp1)?;
    let f_vals = read_f64s(&dir.join("f.bin"), n_draws * n * manifest.n_agents)?;
    let hyper_len = 2 * jp1 + 3;
    let hyper_vals = read_f64s(&dir.join("hyper.bin"), n_draws * hyper_len)?;
    let tau_vals = read_f64s(&dir.join("tau.bin"), n_draws * n)?;

    let mut states = Vec::with_capacity(n_draws);
    for d in 0..n_draws {
        let mu = mu_vals[d * n..(d + 1) * n].to_vec();
        let beta = DMatrix::from_fn(n, jp1, |i, j| beta_vals[d * n * jp1 + i * jp1 + j]);
        let f = DMatrix::from_fn(n, manifest.n_agents, |i, j| {
            f_vals[d * n * manifest.n_agents + i * manifest.n_agents + j]
        });
        let h = &hyper_vals[d * hyper_len..(d + 1) * hyper_len];
        let hyper = Hyperparams {
            sigma2: h[0],
            tau2_mu: h[1],
            tau2_beta: h[2..2 + jp1].to_vec(),
            phi_mu: h[2 + jp1],
            phi_beta: h[3 + jp1..3 + 2 * jp1].to_vec(),
        };
        states.push((LatentState { mu, beta, f }, hyper));
    }
    let tau = DMatrix::from_fn(n_draws, n, |d, i| tau_vals[d * n + i]);

    Ok(ChainBundle {
        draws: PosteriorDraws { states, tau },
        priors: manifest.priors,
        settings: manifest.settings,
        encoding: manifest.encoding,
        x_train,
        n_agents: manifest.n_agents,
    })
}

/// Writes `chain_diagnostics.json`.
pub fn write_diagnostics(path: &Path, diagnostics: &ChainDiagnostics) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(diagnostics)?)?;
    Ok(())
}
