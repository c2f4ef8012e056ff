//! Dense linear-algebra reference routes.
//!
//! Everything here recomputes a quantity the sparse machinery produces, by a
//! different algorithm on dense matrices (nalgebra LU / Cholesky instead of
//! the hand-rolled factorized recursion). These routes back the self-check
//! command and the test suite; production code never calls them on large
//! problems.

use nalgebra::{DMatrix, DVector};

/// Dense exponential correlation matrix of the row points.
pub fn dense_corr(points: &DMatrix<f64>, phi: f64) -> DMatrix<f64> {
    let n = points.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        let d = (points.row(i) - points.row(j)).norm();
        (-d / phi).exp()
    })
}

/// Multivariate normal log density with constant mean, via dense Cholesky.
pub fn mvn_logpdf(values: &[f64], mean: f64, cov: &DMatrix<f64>) -> f64 {
    let n = values.len();
    let chol = cov.clone().cholesky().expect("covariance not positive definite");
    let centered = DVector::from_iterator(n, values.iter().map(|v| v - mean));
    let solved = chol.solve(&centered);
    let quad = centered.dot(&solved);
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad)
}

/// Brute-force Schur-complement conditioning of a point on a neighbor set:
/// returns `(b, f)` with `b = C_nn^-1 c` solved by LU and
/// `f = 1 - c^T C_nn^-1 c`. `cross` is the row-major neighbor-neighbor
/// distance matrix and `dists` the point-to-neighbor distances; `jitter` is
/// added to the diagonal.
pub fn schur_b_f(dists: &[f64], cross: &[f64], phi: f64, jitter: f64) -> (Vec<f64>, f64) {
    let k = dists.len();
    if k == 0 {
        return (Vec::new(), 1.0);
    }
    let mut c_nn = DMatrix::from_fn(k, k, |a, b| (-cross[a * k + b] / phi).exp());
    for a in 0..k {
        c_nn[(a, a)] += jitter;
    }
    let c_in = DVector::from_iterator(k, dists.iter().map(|&d| (-d / phi).exp()));
    let lu = c_nn.lu();
    let b = lu.solve(&c_in).expect("neighbor correlation matrix singular");
    let f = 1.0 - c_in.dot(&b);
    (b.iter().copied().collect(), f)
}

/// Conditional mean and variance of coordinate `i` given all others, from a
/// dense precision matrix of a Gaussian with constant mean.
pub fn conditional_from_precision(
    prec: &DMatrix<f64>,
    values: &[f64],
    mean: f64,
    i: usize,
) -> (f64, f64) {
    let n = values.len();
    let var = 1.0 / prec[(i, i)];
    let mut cross = 0.0;
    for k in 0..n {
        if k != i {
            cross += prec[(i, k)] * (values[k] - mean);
        }
    }
    (mean - var * cross, var)
}

/// Dense precision matrix of a GP with covariance `tau2 * C(points; phi)`.
pub fn dense_gp_precision(points: &DMatrix<f64>, phi: f64, tau2: f64) -> DMatrix<f64> {
    let cov = dense_corr(points, phi) * tau2;
    cov.try_inverse().expect("covariance not invertible")
}

/// Random point set with a minimum pairwise separation of 0.05. Checks that
/// compare the factorized density against the dense one need this: the
/// factorization jitters each neighbor matrix by design, and near-duplicate
/// points would amplify that jitter past the comparison tolerances.
pub fn separated_points(
    n: usize,
    d: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> DMatrix<f64> {
    use rand_distr::{Distribution, StandardNormal};
    const MIN_SEP: f64 = 0.05;
    loop {
        let pts = DMatrix::from_fn(n, d, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            z * 1.5
        });
        let mut ok = true;
        'outer: for i in 0..n {
            for k in (i + 1)..n {
                if (pts.row(i) - pts.row(k)).norm() < MIN_SEP {
                    ok = false;
                    break 'outer;
                }
            }
        }
        if ok {
            return pts;
        }
    }
}

/// Log gamma function (Lanczos approximation, g = 7, 9 coefficients).
/// Accurate to ~1e-13 over the positive reals.
pub fn lgamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.5203681218851,
        -1259.1392167224028,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507343278686905,
        -0.13857109526572012,
        9.984_369_578_019_572e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - lgamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma P(a, x): series for x < a+1,
/// continued fraction otherwise.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    assert!(a > 0.0 && x >= 0.0);
    if x == 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // series representation
        let mut ap = a;
        let mut sum = 1.0 / a;
        let mut del = sum;
        for _ in 0..500 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-15 {
                break;
            }
        }
        sum * (-x + a * x.ln() - lgamma(a)).exp()
    } else {
        // Lentz continued fraction for Q(a, x)
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-15 {
                break;
            }
        }
        let q = (-x + a * x.ln() - lgamma(a)).exp() * h;
        1.0 - q
    }
}

/// CDF of the inverse gamma distribution with shape `a` and scale `b`
/// (density proportional to `x^{-a-1} exp(-b/x)`).
pub fn inv_gamma_cdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    1.0 - gamma_p(a, b / x)
}

/// Two-sided Kolmogorov-Smirnov statistic of a sample against a CDF.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let f = cdf(x);
        d = d.max((f - i as f64 / n).abs());
        d = d.max(((i + 1) as f64 / n - f).abs());
    }
    d
}
