//! Additive-model agent fitted by backfitting.
//!
//! The outcome model is `Y = f1(X) + T f2(X) + eps` with each surface a sum
//! of univariate smooths over the encoded columns: penalized cubic B-splines
//! for continuous columns (smoothing parameter by generalized
//! cross-validation), group means for discrete ones. The treatment-effect
//! estimate is the fitted `f2`; its pointwise standard error is the crude
//! weighted-bootstrap one, the standard deviation of `f2` over refits with
//! independent Exp(1) row weights.
//!
//! Backfitting alternates across columns, but within a column the baseline
//! and treatment smooths are solved jointly: the two share the same basis
//! and rows, and alternating between them crawls along a nearly flat ridge.
//! Smoothing parameters are chosen by marginal GCV during the first cycles,
//! then frozen so the joint systems can be factored once per fit.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;

use crate::data::ObservedData;
use crate::error::{Error, Result};
use crate::rngutil;

use super::{FittedAgent, AGENT_SE_FLOOR};

const MAX_CYCLES: usize = 200;
/// Relative (to the outcome scale) change in fitted values that counts as
/// converged. One-hot columns of a shared categorical sum to a constant, a
/// flat direction across columns that alternation crawls along; movement at
/// this scale is far below any statistically meaningful change.
const CONVERGENCE_TOL: f64 = 1e-5;
/// Alternation cycles that reselect smoothing parameters by GCV before they
/// freeze and the joint per-column systems are factored.
const GCV_CYCLES: usize = 2;
const LAMBDA_GRID: [f64; 11] = [
    1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4, 1e5, 1e6,
];
const RIDGE: f64 = 1e-8;

// ---------------------------------------------------------------------------
// univariate bases

/// Cubic B-spline basis row at `x` for a clamped knot vector.
fn bspline_row(knots: &[f64], degree: usize, n_basis: usize, x: f64) -> Vec<f64> {
    let lo = knots[degree];
    let hi = knots[knots.len() - degree - 1];
    let x = x.clamp(lo, hi);
    let mut b = vec![0.0; knots.len() - 1];
    // degree-0 indicators; the last interval is closed on the right
    for i in 0..b.len() {
        let in_interval = if x < hi {
            knots[i] <= x && x < knots[i + 1]
        } else {
            knots[i] < knots[i + 1] && x <= knots[i + 1] && knots[i + 1] >= hi
        };
        b[i] = f64::from(in_interval);
    }
    if x >= hi {
        let mut seen = false;
        for i in (0..b.len()).rev() {
            if b[i] == 1.0 {
                if seen {
                    b[i] = 0.0;
                } else {
                    seen = true;
                }
            }
        }
    }
    for d in 1..=degree {
        for i in 0..(b.len() - d) {
            let left_den = knots[i + d] - knots[i];
            let right_den = knots[i + d + 1] - knots[i + 1];
            let left = if left_den > 0.0 {
                (x - knots[i]) / left_den * b[i]
            } else {
                0.0
            };
            let right = if right_den > 0.0 {
                (knots[i + d + 1] - x) / right_den * b[i + 1]
            } else {
                0.0
            };
            b[i] = left + right;
        }
    }
    b.truncate(n_basis);
    b
}

/// Clamped cubic knot vector with interior knots at quantiles.
fn quantile_knots(values: &[f64], n_interior: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (a, b) = (sorted[0], sorted[sorted.len() - 1]);
    let mut interior = Vec::with_capacity(n_interior);
    for k in 1..=n_interior {
        let p = k as f64 / (n_interior + 1) as f64;
        let pos = p * (sorted.len() - 1) as f64;
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        let q = if i + 1 < sorted.len() {
            sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
        } else {
            sorted[i]
        };
        if q > a && q < b && interior.last().is_none_or(|&last| q > last) {
            interior.push(q);
        }
    }
    let mut knots = vec![a; 4];
    knots.extend(interior);
    knots.extend(vec![b; 4]);
    knots
}

/// Basis of one column: cubic splines for continuous values, level
/// indicators (group means) for discrete ones.
#[derive(Debug, Clone)]
enum ColumnBasis {
    Spline { knots: Vec<f64>, n_basis: usize },
    Levels { levels: Vec<f64> },
    /// Degenerate column; contributes nothing.
    Zero,
}

impl ColumnBasis {
    /// `n_fit` is the smaller fitting sample (the treated arm for the
    /// treatment block); the knot budget scales with it so small arms get
    /// proportionally lean bases. An oversized treated block would hand
    /// backfitting a near-null space to wander in.
    fn build(values: &[f64], n_fit: usize) -> Self {
        let mut uniq = values.to_vec();
        uniq.sort_by(f64::total_cmp);
        uniq.dedup();
        if uniq.len() < 2 {
            return ColumnBasis::Zero;
        }
        if uniq.len() <= 2 {
            return ColumnBasis::Levels { levels: uniq };
        }
        let n_interior = (uniq.len().saturating_sub(2))
            .min(8)
            .min((n_fit / 10).max(2));
        let knots = quantile_knots(values, n_interior);
        let n_basis = knots.len() - 4;
        ColumnBasis::Spline { knots, n_basis }
    }

    fn width(&self) -> usize {
        match self {
            ColumnBasis::Spline { n_basis, .. } => *n_basis,
            ColumnBasis::Levels { levels } => levels.len(),
            ColumnBasis::Zero => 0,
        }
    }

    fn row(&self, x: f64) -> Vec<f64> {
        match self {
            ColumnBasis::Spline { knots, n_basis } => bspline_row(knots, 3, *n_basis, x),
            ColumnBasis::Levels { levels } => {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for (k, &lv) in levels.iter().enumerate() {
                    let d = (lv - x).abs();
                    if d < best_d {
                        best_d = d;
                        best = k;
                    }
                }
                let mut row = vec![0.0; levels.len()];
                row[best] = 1.0;
                row
            }
            ColumnBasis::Zero => Vec::new(),
        }
    }

    /// Second-difference penalty for splines; a ridge penalty for level
    /// indicators. Shrinking level coefficients matters beyond smoothing:
    /// one-hot columns of a shared categorical carry nearly flat linear
    /// combinations across terms, and unpenalized group means would let
    /// backfitting crawl along them indefinitely.
    fn penalty(&self) -> DMatrix<f64> {
        let b = self.width();
        let mut p = DMatrix::zeros(b, b);
        match self {
            ColumnBasis::Spline { .. } => {
                for r in 0..b.saturating_sub(2) {
                    let idx = [r, r + 1, r + 2];
                    let coef = [1.0, -2.0, 1.0];
                    for a in 0..3 {
                        for c in 0..3 {
                            p[(idx[a], idx[c])] += coef[a] * coef[c];
                        }
                    }
                }
            }
            ColumnBasis::Levels { .. } => {
                for d in 0..b {
                    p[(d, d)] = 1.0;
                }
            }
            ColumnBasis::Zero => {}
        }
        p
    }

    fn lambda_grid(&self) -> &'static [f64] {
        &LAMBDA_GRID
    }
}

/// A fitted univariate smooth, evaluable anywhere.
#[derive(Debug, Clone)]
struct SmoothFn {
    basis: ColumnBasis,
    coefs: Vec<f64>,
    center: f64,
}

impl SmoothFn {
    fn zero() -> Self {
        SmoothFn {
            basis: ColumnBasis::Zero,
            coefs: Vec::new(),
            center: 0.0,
        }
    }

    fn eval(&self, v: f64) -> f64 {
        if matches!(self.basis, ColumnBasis::Zero) {
            return 0.0;
        }
        let row = self.basis.row(v);
        row.iter().zip(&self.coefs).map(|(b, c)| b * c).sum::<f64>() - self.center
    }
}

// ---------------------------------------------------------------------------
// per-column fitting machinery

struct ColumnWorkspace {
    basis: ColumnBasis,
    /// Basis at every training row, `n x B`.
    rows: DMatrix<f64>,
    penalty: DMatrix<f64>,
    /// B'WB over all rows and over treated rows.
    gram_all: DMatrix<f64>,
    gram_treated: DMatrix<f64>,
    lambda_g: f64,
    lambda_h: f64,
    /// Cholesky of the joint two-block system, built once after the
    /// smoothing parameters freeze.
    joint: Option<Cholesky<f64, Dyn>>,
}

impl ColumnWorkspace {
    fn build(values: &[f64], t: &[u8], w: &[f64]) -> Self {
        let n_treated = t.iter().filter(|&&ti| ti == 1).count();
        let n_fit = n_treated.min(values.len() - n_treated).max(4);
        let basis = ColumnBasis::build(values, n_fit);
        let bw = basis.width();
        let n = values.len();
        let rows = DMatrix::from_fn(n, bw, |i, k| basis.row(values[i])[k]);
        let mut gram_all = DMatrix::zeros(bw, bw);
        let mut gram_treated = DMatrix::zeros(bw, bw);
        for i in 0..n {
            let r = rows.row(i);
            for a in 0..bw {
                for b in a..bw {
                    let v = w[i] * r[a] * r[b];
                    gram_all[(a, b)] += v;
                    if t[i] == 1 {
                        gram_treated[(a, b)] += v;
                    }
                }
            }
        }
        for a in 0..bw {
            for b in 0..a {
                gram_all[(a, b)] = gram_all[(b, a)];
                gram_treated[(a, b)] = gram_treated[(b, a)];
            }
        }
        let penalty = basis.penalty();
        ColumnWorkspace {
            basis,
            rows,
            penalty,
            gram_all,
            gram_treated,
            lambda_g: LAMBDA_GRID[0],
            lambda_h: LAMBDA_GRID[0],
            joint: None,
        }
    }

    /// Marginal penalized fit of this column's basis to `resp` on the rows
    /// where `mask` is nonzero, choosing the smoothing parameter by GCV.
    /// Returns the chosen lambda and the uncentered fitted values at all
    /// training rows.
    fn marginal_gcv_fit(&self, resp: &[f64], w: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
        let bw = self.basis.width();
        let n = resp.len();
        let mut gram = DMatrix::zeros(bw, bw);
        let mut rhs = DVector::zeros(bw);
        let mut wsum = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            wsum += w[i];
            let r = self.rows.row(i);
            for a in 0..bw {
                rhs[a] += w[i] * r[a] * resp[i];
                for b in a..bw {
                    gram[(a, b)] += w[i] * r[a] * r[b];
                }
            }
        }
        for a in 0..bw {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
            }
        }
        let mut best: Option<(f64, f64, DVector<f64>)> = None;
        for &lambda in self.basis.lambda_grid() {
            let mut a = &gram + &self.penalty * lambda;
            for d in 0..bw {
                a[(d, d)] += RIDGE;
            }
            let chol = match a.cholesky() {
                Some(c) => c,
                None => continue,
            };
            let coefs = chol.solve(&rhs);
            let mut edf = 0.0;
            for k in 0..bw {
                let col = gram.column(k).clone_owned();
                edf += chol.solve(&col)[k];
            }
            let mut rss = 0.0;
            for i in 0..n {
                if !mask[i] {
                    continue;
                }
                let fit = self.rows.row(i).transpose().dot(&coefs);
                let r = resp[i] - fit;
                rss += w[i] * r * r;
            }
            let denom = (wsum - edf).max(1e-8);
            let gcv = wsum * rss / (denom * denom);
            if best.as_ref().is_none_or(|(g, _, _)| gcv < *g) {
                best = Some((gcv, lambda, coefs));
            }
        }
        let (_, lambda, coefs) = best.ok_or_else(|| {
            Error::Agent("no viable smoothing parameter for a column".to_string())
        })?;
        let fitted: Vec<f64> = (0..n)
            .map(|i| self.rows.row(i).transpose().dot(&coefs))
            .collect();
        Ok((lambda, fitted))
    }

    /// Factors the joint baseline/treatment system at the frozen smoothing
    /// parameters.
    fn factor_joint(&mut self) -> Result<()> {
        let bw = self.basis.width();
        if bw == 0 {
            return Ok(());
        }
        let mut j = DMatrix::zeros(2 * bw, 2 * bw);
        j.view_mut((0, 0), (bw, bw))
            .copy_from(&(&self.gram_all + &self.penalty * self.lambda_g));
        j.view_mut((0, bw), (bw, bw)).copy_from(&self.gram_treated);
        j.view_mut((bw, 0), (bw, bw)).copy_from(&self.gram_treated);
        j.view_mut((bw, bw), (bw, bw))
            .copy_from(&(&self.gram_treated + &self.penalty * self.lambda_h));
        for d in 0..2 * bw {
            j[(d, d)] += RIDGE;
        }
        let chol = j.cholesky().ok_or_else(|| {
            Error::Agent("joint smoother system not positive definite".to_string())
        })?;
        self.joint = Some(chol);
        Ok(())
    }

    /// Solves the joint system for the partial residual `resp` (with both of
    /// this column's terms removed); returns uncentered baseline and
    /// treatment values at all training rows.
    fn joint_fit(&self, resp: &[f64], t: &[u8], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let bw = self.basis.width();
        let n = resp.len();
        if bw == 0 {
            return (vec![0.0; n], vec![0.0; n]);
        }
        let mut rhs = DVector::zeros(2 * bw);
        for i in 0..n {
            let r = self.rows.row(i);
            let wr = w[i] * resp[i];
            for a in 0..bw {
                rhs[a] += wr * r[a];
                if t[i] == 1 {
                    rhs[bw + a] += wr * r[a];
                }
            }
        }
        let sol = self.joint.as_ref().expect("joint system factored").solve(&rhs);
        let cg = sol.rows(0, bw);
        let ch = sol.rows(bw, bw);
        let mut g = vec![0.0; n];
        let mut h = vec![0.0; n];
        for i in 0..n {
            let r = self.rows.row(i);
            let mut vg = 0.0;
            let mut vh = 0.0;
            for a in 0..bw {
                vg += r[a] * cg[a];
                vh += r[a] * ch[a];
            }
            g[i] = vg;
            h[i] = vh;
        }
        (g, h)
    }

    fn smooth_from(&self, coefs_g: &[f64]) -> SmoothFn {
        SmoothFn {
            basis: self.basis.clone(),
            coefs: coefs_g.to_vec(),
            center: 0.0,
        }
    }
}

// ---------------------------------------------------------------------------
// backfitting

/// One fitted additive model; `tau_at` evaluates the treatment surface.
#[derive(Debug, Clone)]
pub(crate) struct AmModel {
    alpha2: f64,
    treatment: Vec<(usize, SmoothFn)>,
}

impl AmModel {
    pub(crate) fn tau_at(&self, x: &[f64]) -> f64 {
        self.alpha2
            + self
                .treatment
                .iter()
                .map(|(col, s)| s.eval(x[*col]))
                .sum::<f64>()
    }
}

/// Backfits the two-block additive model under row weights `w`; returns the
/// model and the fitted treatment surface at the training rows.
fn backfit(data: &ObservedData, w: &[f64]) -> Result<(AmModel, Vec<f64>)> {
    let n = data.n();
    let p = data.p();
    let treated_mask: Vec<bool> = data.t.iter().map(|&t| t == 1).collect();
    let all_mask = vec![true; n];
    let wsum_all: f64 = w.iter().sum();
    let wsum_treated: f64 = (0..n).filter(|&i| treated_mask[i]).map(|i| w[i]).sum();
    if wsum_all <= 0.0 || wsum_treated <= 0.0 {
        return Err(Error::Agent("degenerate backfitting weights".to_string()));
    }

    let mut ws: Vec<ColumnWorkspace> = (0..p)
        .map(|k| {
            let col: Vec<f64> = (0..n).map(|i| data.x[(i, k)]).collect();
            ColumnWorkspace::build(&col, &data.t, w)
        })
        .collect();

    let mut alpha0 = 0.0;
    let mut alpha2 = 0.0;
    let mut g_vals = vec![vec![0.0; n]; p];
    let mut h_vals = vec![vec![0.0; n]; p];
    let mut fitted = vec![0.0; n];

    let y_scale = data.y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    let mut last_change = f64::INFINITY;
    let mut converged = false;

    for cycle in 0..MAX_CYCLES {
        let prev = fitted.clone();

        // joint intercept update (exact 2x2 weighted least squares)
        {
            let mut r0 = 0.0;
            let mut r2 = 0.0;
            for i in 0..n {
                let r = data.y[i]
                    - (fitted[i] - alpha0 - if treated_mask[i] { alpha2 } else { 0.0 });
                r0 += w[i] * r;
                if treated_mask[i] {
                    r2 += w[i] * r;
                }
            }
            // [wsum_all, wsum_t; wsum_t, wsum_t] [a0, a2]' = [r0, r2]'
            let det = wsum_all * wsum_treated - wsum_treated * wsum_treated;
            let (new_a0, new_a2) = if det.abs() > 1e-12 {
                (
                    (r0 - r2) / (wsum_all - wsum_treated),
                    (r2 * wsum_all - r0 * wsum_treated) / det,
                )
            } else {
                (r0 / wsum_all, 0.0)
            };
            for i in 0..n {
                fitted[i] +=
                    (new_a0 - alpha0) + if treated_mask[i] { new_a2 - alpha2 } else { 0.0 };
            }
            alpha0 = new_a0;
            alpha2 = new_a2;
        }

        if cycle < GCV_CYCLES {
            // alternation with marginal GCV selection; uncentered new values
            // replace the old term, then the center moves into the intercept
            // (net fitted change from centering is zero)
            for k in 0..p {
                if ws[k].basis.width() == 0 {
                    continue;
                }
                let resp: Vec<f64> = (0..n)
                    .map(|i| data.y[i] - fitted[i] + g_vals[k][i])
                    .collect();
                let (lambda, vals) = ws[k].marginal_gcv_fit(&resp, w, &all_mask)?;
                ws[k].lambda_g = lambda;
                let center = (0..n).map(|i| w[i] * vals[i]).sum::<f64>() / wsum_all;
                for i in 0..n {
                    fitted[i] += vals[i] - g_vals[k][i];
                    g_vals[k][i] = vals[i] - center;
                }
                alpha0 += center;

                let resp: Vec<f64> = (0..n)
                    .map(|i| {
                        data.y[i] - fitted[i] + if treated_mask[i] { h_vals[k][i] } else { 0.0 }
                    })
                    .collect();
                let (lambda, vals) = ws[k].marginal_gcv_fit(&resp, w, &treated_mask)?;
                ws[k].lambda_h = lambda;
                let center = (0..n)
                    .filter(|&i| treated_mask[i])
                    .map(|i| w[i] * vals[i])
                    .sum::<f64>()
                    / wsum_treated;
                for i in 0..n {
                    if treated_mask[i] {
                        fitted[i] += vals[i] - h_vals[k][i];
                    }
                    h_vals[k][i] = vals[i] - center;
                }
                alpha2 += center;
            }
        } else {
            if cycle == GCV_CYCLES {
                for wk in ws.iter_mut() {
                    wk.factor_joint()?;
                }
            }
            for k in 0..p {
                if ws[k].basis.width() == 0 {
                    continue;
                }
                let resp: Vec<f64> = (0..n)
                    .map(|i| {
                        data.y[i] - fitted[i]
                            + g_vals[k][i]
                            + if treated_mask[i] { h_vals[k][i] } else { 0.0 }
                    })
                    .collect();
                let (g_raw, h_raw) = ws[k].joint_fit(&resp, &data.t, w);
                let center_g = (0..n).map(|i| w[i] * g_raw[i]).sum::<f64>() / wsum_all;
                let center_h = (0..n)
                    .filter(|&i| treated_mask[i])
                    .map(|i| w[i] * h_raw[i])
                    .sum::<f64>()
                    / wsum_treated;
                for i in 0..n {
                    fitted[i] += g_raw[i] - g_vals[k][i];
                    if treated_mask[i] {
                        fitted[i] += h_raw[i] - h_vals[k][i];
                    }
                    g_vals[k][i] = g_raw[i] - center_g;
                    h_vals[k][i] = h_raw[i] - center_h;
                }
                alpha0 += center_g;
                alpha2 += center_h;
            }
        }

        last_change = fitted
            .iter()
            .zip(&prev)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
            / y_scale;
        if std::env::var_os("BCS_TRACE_BACKFIT").is_some() && cycle % 10 == 0 {
            let gn: Vec<f64> = g_vals.iter().map(|v| v.iter().fold(0.0f64, |m, x| m.max(x.abs()))).collect();
            let hn: Vec<f64> = h_vals.iter().map(|v| v.iter().fold(0.0f64, |m, x| m.max(x.abs()))).collect();
            eprintln!("cycle {cycle}: delta {last_change:.3e} a0 {alpha0:.3} a2 {alpha2:.3} |g| {gn:.3?} |h| {hn:.3?}");
        }
        if last_change < CONVERGENCE_TOL && cycle >= GCV_CYCLES {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Agent(format!(
            "backfitting did not converge after {MAX_CYCLES} cycles (last relative change {last_change:.3e})"
        )));
    }

    // Final pass: recover each treatment smooth's coefficients with one more
    // joint solve at the converged partial residuals.
    let mut treatment: Vec<(usize, SmoothFn)> = Vec::with_capacity(p);
    for k in 0..p {
        let bw = ws[k].basis.width();
        if bw == 0 {
            treatment.push((k, SmoothFn::zero()));
            continue;
        }
        let resp: Vec<f64> = (0..n)
            .map(|i| {
                data.y[i] - fitted[i]
                    + g_vals[k][i]
                    + if treated_mask[i] { h_vals[k][i] } else { 0.0 }
            })
            .collect();
        let mut rhs = DVector::zeros(2 * bw);
        for i in 0..n {
            let r = ws[k].rows.row(i);
            let wr = w[i] * resp[i];
            for a in 0..bw {
                rhs[a] += wr * r[a];
                if treated_mask[i] {
                    rhs[bw + a] += wr * r[a];
                }
            }
        }
        let joint = match &ws[k].joint {
            Some(j) => j,
            None => {
                ws[k].factor_joint()?;
                ws[k].joint.as_ref().unwrap()
            }
        };
        let sol = joint.solve(&rhs);
        let ch: Vec<f64> = sol.rows(bw, bw).iter().copied().collect();
        let h_raw: Vec<f64> = (0..n)
            .map(|i| {
                let r = ws[k].rows.row(i);
                (0..bw).map(|a| r[a] * ch[a]).sum()
            })
            .collect();
        let center_h = (0..n)
            .filter(|&i| treated_mask[i])
            .map(|i| w[i] * h_raw[i])
            .sum::<f64>()
            / wsum_treated;
        let mut smooth = ws[k].smooth_from(&ch);
        smooth.center = center_h;
        treatment.push((k, smooth));
    }

    let model = AmModel { alpha2, treatment };
    let tau: Vec<f64> = (0..n)
        .map(|i| alpha2 + (0..p).map(|k| h_vals[k][i]).sum::<f64>())
        .collect();
    Ok((model, tau))
}

// ---------------------------------------------------------------------------
// public agent

#[derive(Debug, Clone)]
pub struct FittedAdditiveAgent {
    main: AmModel,
    boots: Vec<AmModel>,
    train_tau: Vec<f64>,
    train_se: Vec<f64>,
}

/// Fits the additive agent; `bootstrap_reps` weighted refits feed the
/// pointwise standard errors.
pub fn fit_additive_agent(
    data: &ObservedData,
    bootstrap_reps: usize,
    seed: u64,
) -> Result<FittedAdditiveAgent> {
    let n = data.n();
    if n < 20 {
        return Err(Error::Agent(format!(
            "additive agent needs at least 20 rows, got {n}"
        )));
    }
    if bootstrap_reps == 0 {
        return Err(Error::Agent(
            "standard errors require bootstrap replications (bootstrap_reps >= 1)".to_string(),
        ));
    }

    let (main, train_tau) = backfit(data, &vec![1.0; n])?;

    let boot_results: Result<Vec<(AmModel, Vec<f64>)>> = (0..bootstrap_reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rngutil::substream(seed, rep as u64 + 1);
            let w: Vec<f64> = (0..n)
                .map(|_| {
                    use rand_distr::Distribution;
                    rand_distr::Exp1.sample(&mut rng)
                })
                .collect();
            backfit(data, &w)
        })
        .collect();
    let boot_results = boot_results?;

    let mut train_se = vec![0.0; n];
    for i in 0..n {
        let vals: Vec<f64> = boot_results.iter().map(|(_, tau)| tau[i]).collect();
        train_se[i] = sd(&vals).max(AGENT_SE_FLOOR);
    }
    let boots = boot_results.into_iter().map(|(m, _)| m).collect();

    Ok(FittedAdditiveAgent {
        main,
        boots,
        train_tau,
        train_se,
    })
}

fn sd(vals: &[f64]) -> f64 {
    let n = vals.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / n;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

impl FittedAgent for FittedAdditiveAgent {
    fn tau_se_at(&self, x: &[f64]) -> (f64, f64) {
        let tau = self.main.tau_at(x);
        let vals: Vec<f64> = self.boots.iter().map(|m| m.tau_at(x)).collect();
        (tau, sd(&vals).max(AGENT_SE_FLOOR))
    }

    fn train_tau(&self) -> &[f64] {
        &self.train_tau
    }

    fn train_se(&self) -> &[f64] {
        &self.train_se
    }
}
