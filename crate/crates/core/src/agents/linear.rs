//! Linear-model agent: ordinary least squares on `[1, X, T, T*X]`.
//!
//! The treatment-effect estimate is the fitted interaction block evaluated
//! at a point, `tau(x) = [1, x]' b2`, where `b2` collects the coefficients
//! on `T` and `T*X`; its standard error comes from the matching block of the
//! OLS covariance. The `T` main effect plays the role of the interaction
//! intercept.

use nalgebra::{DMatrix, DVector};

use crate::data::ObservedData;
use crate::error::{Error, Result};

use super::{FittedAgent, AGENT_SE_FLOOR};

#[derive(Debug, Clone)]
pub struct FittedLinearAgent {
    /// Coefficients on `[T, T*X]`, length `p+1`.
    beta2: DVector<f64>,
    /// `sigma2_hat * block of (Z'Z)^-1` for the interaction columns.
    cov2: DMatrix<f64>,
    train_tau: Vec<f64>,
    train_se: Vec<f64>,
}

pub fn fit_linear_agent(data: &ObservedData) -> Result<FittedLinearAgent> {
    let n = data.n();
    let p = data.p();
    let q = 2 * (p + 1);
    if n <= q {
        return Err(Error::Agent(format!(
            "linear agent needs more rows than the {q} design columns, got {n}"
        )));
    }

    // Z = [1, X, T, T*X]
    let mut z = DMatrix::zeros(n, q);
    for i in 0..n {
        z[(i, 0)] = 1.0;
        for k in 0..p {
            z[(i, 1 + k)] = data.x[(i, k)];
        }
        let t = data.t[i] as f64;
        z[(i, p + 1)] = t;
        for k in 0..p {
            z[(i, p + 2 + k)] = t * data.x[(i, k)];
        }
    }
    let zt = z.transpose();
    let ztz = &zt * &z;
    let zty = &zt * DVector::from_column_slice(&data.y);

    let chol = ztz.clone().cholesky().ok_or_else(|| {
        let labels = column_labels(p);
        Error::Agent(format!(
            "design matrix [1, X, T, T*X] is rank deficient; check for dependent columns among {}",
            labels.join(", ")
        ))
    })?;
    let beta = chol.solve(&zty);

    let fitted = &z * &beta;
    let rss: f64 = data
        .y
        .iter()
        .zip(fitted.iter())
        .map(|(y, f)| (y - f) * (y - f))
        .sum();
    let sigma2_hat = rss / (n - q) as f64;

    let ztz_inv = chol.inverse();
    let cov2 = ztz_inv.view((p + 1, p + 1), (p + 1, p + 1)).clone_owned() * sigma2_hat;
    let beta2 = beta.rows(p + 1, p + 1).clone_owned();

    let mut agent = FittedLinearAgent {
        beta2,
        cov2,
        train_tau: Vec::new(),
        train_se: Vec::new(),
    };
    let (mut tau, mut se) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let row: Vec<f64> = data.x.row(i).iter().copied().collect();
        let (t, s) = agent.tau_se_at(&row);
        tau.push(t);
        se.push(s);
    }
    agent.train_tau = tau;
    agent.train_se = se;
    Ok(agent)
}

fn column_labels(p: usize) -> Vec<String> {
    let mut labels = vec!["intercept".to_string()];
    labels.extend((1..=p).map(|k| format!("x{k}")));
    labels.push("t".to_string());
    labels.extend((1..=p).map(|k| format!("t*x{k}")));
    labels
}

impl FittedAgent for FittedLinearAgent {
    fn tau_se_at(&self, x: &[f64]) -> (f64, f64) {
        let p = x.len();
        let mut c = DVector::zeros(p + 1);
        c[0] = 1.0;
        for k in 0..p {
            c[k + 1] = x[k];
        }
        let tau = self.beta2.dot(&c);
        let var = (&self.cov2 * &c).dot(&c);
        (tau, var.max(0.0).sqrt().max(AGENT_SE_FLOOR))
    }

    fn train_tau(&self) -> &[f64] {
        &self.train_tau
    }

    fn train_se(&self) -> &[f64] {
        &self.train_se
    }
}
