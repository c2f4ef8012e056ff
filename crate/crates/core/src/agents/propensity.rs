//! Propensity-score estimation: logistic regression of `T` on `[1, X]` by
//! Newton-Raphson. Fitted probabilities are clipped to `[0.01, 0.99]`, which
//! enforces the overlap condition numerically.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ObservedData;
use crate::error::{Error, Result};

const MAX_ITER: usize = 100;
const GRAD_TOL: f64 = 1e-8;
/// Any coefficient beyond this during iteration signals (quasi-)complete
/// separation: the MLE is diverging.
const SEPARATION_BOUND: f64 = 30.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityModel {
    /// Logistic weights on `[1, X]`, length `p+1`.
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Fits the logistic model and returns it with the clipped fitted
/// propensities.
pub fn estimate_propensity(data: &ObservedData) -> Result<(PropensityModel, Vec<f64>)> {
    let n = data.n();
    let p = data.p();
    let n_treated = data.n_treated();
    if n_treated == 0 || n_treated == n {
        return Err(Error::Agent(
            "propensity estimation requires both treatment arms".to_string(),
        ));
    }

    let mut design = DMatrix::zeros(n, p + 1);
    for i in 0..n {
        design[(i, 0)] = 1.0;
        for k in 0..p {
            design[(i, k + 1)] = data.x[(i, k)];
        }
    }
    let t = DVector::from_iterator(n, data.t.iter().map(|&t| t as f64));

    let mut beta = DVector::zeros(p + 1);
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=MAX_ITER {
        iterations = iter;
        let eta = &design * &beta;
        let prob = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let grad = design.transpose() * (&t - &prob);
        if grad.amax() < GRAD_TOL {
            converged = true;
            break;
        }
        let w = prob.map(|p| (p * (1.0 - p)).max(1e-10));
        let mut xtwx = DMatrix::zeros(p + 1, p + 1);
        for i in 0..n {
            let row = design.row(i);
            for a in 0..=p {
                for b in a..=p {
                    xtwx[(a, b)] += w[i] * row[a] * row[b];
                }
            }
        }
        for a in 0..=p {
            for b in 0..a {
                xtwx[(a, b)] = xtwx[(b, a)];
            }
        }
        let step = xtwx
            .cholesky()
            .ok_or_else(|| Error::Agent("propensity information matrix singular".to_string()))?
            .solve(&grad);
        beta += step;
        if beta.iter().any(|c| c.abs() > SEPARATION_BOUND) {
            return Err(Error::Agent(
                "complete separation detected while estimating propensities; supply known propensity scores instead".to_string(),
            ));
        }
    }

    let eta = &design * &beta;
    let pi: Vec<f64> = eta
        .iter()
        .map(|e| (1.0 / (1.0 + (-e).exp())).clamp(0.01, 0.99))
        .collect();
    Ok((
        PropensityModel {
            coefficients: beta.iter().copied().collect(),
            converged,
            iterations,
        },
        pi,
    ))
}
