//! Nearest-neighbor Gaussian process machinery.
//!
//! A GP over `n` points is factored as a product of conditionals along a
//! fixed ordering, each point conditioning on at most `m` already-ordered
//! neighbors. The factorization needs, per point, the kernel regression
//! weights `b` on its neighbor values and the residual variance fraction
//! `f`; both come from the Schur complement of the neighbor correlation
//! matrix. With full conditioning sets (`m >= n-1`) the factorization is the
//! exact GP joint density.
//!
//! Distances are computed once at graph construction and cached; changing
//! the range parameter only rescales the kernel, never the graph.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Jitter added to the diagonal of every neighbor correlation matrix before
/// factorization; duplicated points would otherwise make it singular.
pub const NBR_JITTER: f64 = 1e-10;

/// Exponential correlation `exp(-d/phi)`.
pub fn correlation(d: f64, phi: f64) -> Result<f64> {
    if phi <= 0.0 {
        return Err(Error::LinearAlgebra(format!(
            "range parameter must be positive, got {phi}"
        )));
    }
    if d < 0.0 {
        return Err(Error::LinearAlgebra(format!("distance must be nonnegative, got {d}")));
    }
    Ok(corr_unchecked(d, phi))
}

#[inline]
fn corr_unchecked(d: f64, phi: f64) -> f64 {
    (-d / phi).exp()
}

/// Ordering, neighbor sets, reverse adjacency, and cached distances for one
/// point cloud. Immutable once built.
#[derive(Debug, Clone)]
pub struct NngpGraph {
    /// Point coordinates, one row per point.
    pub points: DMatrix<f64>,
    /// Requested neighbor count.
    pub m: usize,
    /// Original indices in Vecchia order.
    pub order: Vec<usize>,
    /// `rank[i]` is the position of point `i` in `order`.
    pub rank: Vec<usize>,
    /// `neighbors[i]`: original indices of the conditioning set of point `i`,
    /// all of which precede `i` in `order`.
    pub neighbors: Vec<Vec<usize>>,
    /// `children[i]`: every `(t, pos)` with `neighbors[t][pos] == i`.
    pub children: Vec<Vec<(usize, usize)>>,
    /// `nbr_dist[i][k]`: distance from point `i` to `neighbors[i][k]`.
    pub nbr_dist: Vec<Vec<f64>>,
    /// `nbr_cross[i]`: row-major `|N(i)| x |N(i)|` distances among the
    /// neighbors of `i`.
    pub nbr_cross: Vec<Vec<f64>>,
}

impl NngpGraph {
    /// Builds the graph: points are ordered by ascending sum of
    /// (internally standardized) coordinates with ties broken by original
    /// index, and each point conditions on its `m` nearest predecessors in
    /// Euclidean distance, ties again broken by smaller index.
    pub fn build(points: DMatrix<f64>, m: usize) -> Result<Self> {
        let n = points.nrows();
        if n == 0 {
            return Err(Error::LinearAlgebra("cannot build a graph on zero points".to_string()));
        }
        if m == 0 {
            return Err(Error::LinearAlgebra("neighbor count m must be >= 1".to_string()));
        }

        // Ordering key: coordinate sums on standardized axes so the ordering
        // is insensitive to per-axis scale. Constant axes contribute nothing.
        let mut key = vec![0.0f64; n];
        for c in 0..points.ncols() {
            let col = points.column(c);
            let mean = col.sum() / n as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            if sd > 0.0 {
                for i in 0..n {
                    key[i] += (points[(i, c)] - mean) / sd;
                }
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| key[a].total_cmp(&key[b]).then(a.cmp(&b)));
        let mut rank = vec![0usize; n];
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
        }

        let dist = |a: usize, b: usize| (points.row(a) - points.row(b)).norm();

        let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
        for r in 1..n {
            let i = order[r];
            let mut cands: Vec<(f64, usize)> =
                order[..r].iter().map(|&p| (dist(i, p), p)).collect();
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cands.truncate(m.min(r));
            neighbors[i] = cands.into_iter().map(|(_, p)| p).collect();
        }

        let mut children: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (t, nbrs) in neighbors.iter().enumerate() {
            for (pos, &s) in nbrs.iter().enumerate() {
                children[s].push((t, pos));
            }
        }

        let mut nbr_dist = Vec::with_capacity(n);
        let mut nbr_cross = Vec::with_capacity(n);
        for (i, nb) in neighbors.iter().enumerate() {
            let k = nb.len();
            nbr_dist.push(nb.iter().map(|&p| dist(i, p)).collect::<Vec<_>>());
            let mut cross = vec![0.0; k * k];
            for a in 0..k {
                for b in (a + 1)..k {
                    let d = dist(nb[a], nb[b]);
                    cross[a * k + b] = d;
                    cross[b * k + a] = d;
                }
            }
            nbr_cross.push(cross);
        }

        Ok(NngpGraph {
            points,
            m,
            order,
            rank,
            neighbors,
            children,
            nbr_dist,
            nbr_cross,
        })
    }

    pub fn n(&self) -> usize {
        self.points.nrows()
    }
}

/// Kernel regression weights `b` on a neighbor set and residual variance
/// fraction `f` in (0, 1]; `f = 1` exactly for an empty set.
#[derive(Debug, Clone)]
pub struct ConditioningCoeffs {
    pub b: Vec<f64>,
    pub f: f64,
}

/// `b = C(i,N) C(N,N)^-1` and `f = 1 - C(i,N) C(N,N)^-1 C(N,i)` for point
/// `i` at range `phi`, with [`NBR_JITTER`] on the diagonal of `C(N,N)`.
pub fn conditioning(i: usize, graph: &NngpGraph, phi: f64) -> Result<ConditioningCoeffs> {
    if phi <= 0.0 {
        return Err(Error::LinearAlgebra(format!(
            "range parameter must be positive, got {phi}"
        )));
    }
    let k = graph.neighbors[i].len();
    if k == 0 {
        return Ok(ConditioningCoeffs { b: Vec::new(), f: 1.0 });
    }
    let mut c_nn = vec![0.0f64; k * k];
    let cross = &graph.nbr_cross[i];
    for a in 0..k {
        for bcol in 0..k {
            c_nn[a * k + bcol] = corr_unchecked(cross[a * k + bcol], phi);
        }
        c_nn[a * k + a] += NBR_JITTER;
    }
    let c_in: Vec<f64> = graph.nbr_dist[i].iter().map(|&d| corr_unchecked(d, phi)).collect();

    cholesky_in_place(&mut c_nn, k).map_err(|col| {
        Error::LinearAlgebra(format!(
            "neighbor correlation matrix for point {i} is singular (pivot {col})"
        ))
    })?;
    let mut b = c_in.clone();
    cholesky_solve_in_place(&c_nn, k, &mut b);
    let f = 1.0 - c_in.iter().zip(&b).map(|(c, b)| c * b).sum::<f64>();
    if f <= 0.0 {
        return Err(Error::LinearAlgebra(format!(
            "residual variance fraction for point {i} is nonpositive ({f})"
        )));
    }
    Ok(ConditioningCoeffs { b, f })
}

/// Conditioning coefficients for every point at a fixed range parameter.
/// The sampler caches one of these per latent field and rebuilds it only
/// when that field's range parameter moves.
#[derive(Debug, Clone)]
pub struct CoeffSet {
    pub coeffs: Vec<ConditioningCoeffs>,
}

impl CoeffSet {
    pub fn build(graph: &NngpGraph, phi: f64) -> Result<Self> {
        let coeffs = (0..graph.n())
            .map(|i| conditioning(i, graph, phi))
            .collect::<Result<Vec<_>>>()?;
        Ok(CoeffSet { coeffs })
    }

    /// Residual `v*_i - b_i . v*_N(i)` of the centered field at point `i`.
    pub fn residual(&self, graph: &NngpGraph, values: &[f64], mean: f64, i: usize) -> f64 {
        let c = &self.coeffs[i];
        let mut r = values[i] - mean;
        for (k, &nb) in graph.neighbors[i].iter().enumerate() {
            r -= c.b[k] * (values[nb] - mean);
        }
        r
    }

    /// `sum_i residual_i^2 / f_i`, the quadratic form in the variance
    /// parameter's full conditional.
    pub fn residual_quadform(&self, graph: &NngpGraph, values: &[f64], mean: f64) -> f64 {
        (0..graph.n())
            .map(|i| {
                let r = self.residual(graph, values, mean, i);
                r * r / self.coeffs[i].f
            })
            .sum()
    }

    /// Joint log density of the field under the factorized GP with scale
    /// `tau2`.
    pub fn log_density(&self, graph: &NngpGraph, values: &[f64], mean: f64, tau2: f64) -> f64 {
        const LN_2PI: f64 = 1.8378770664093453;
        (0..graph.n())
            .map(|i| {
                let r = self.residual(graph, values, mean, i);
                let v = tau2 * self.coeffs[i].f;
                -0.5 * (LN_2PI + v.ln() + r * r / v)
            })
            .sum()
    }
}

/// Joint log density of `values` under the factorized GP prior with constant
/// mean, scale `tau2`, and range `phi`.
pub fn nngp_log_density(
    values: &[f64],
    mean: f64,
    tau2: f64,
    graph: &NngpGraph,
    phi: f64,
) -> Result<f64> {
    if tau2 <= 0.0 {
        return Err(Error::LinearAlgebra(format!("tau2 must be positive, got {tau2}")));
    }
    let set = CoeffSet::build(graph, phi)?;
    Ok(set.log_density(graph, values, mean, tau2))
}

/// In-place Cholesky of a row-major `k x k` symmetric matrix; on failure
/// returns the column where the pivot went nonpositive.
pub(crate) fn cholesky_in_place(a: &mut [f64], k: usize) -> std::result::Result<(), usize> {
    for j in 0..k {
        let mut d = a[j * k + j];
        for p in 0..j {
            d -= a[j * k + p] * a[j * k + p];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(j);
        }
        let d = d.sqrt();
        a[j * k + j] = d;
        for i in (j + 1)..k {
            let mut v = a[i * k + j];
            for p in 0..j {
                v -= a[i * k + p] * a[j * k + p];
            }
            a[i * k + j] = v / d;
        }
    }
    Ok(())
}

/// Solves `L L^T x = rhs` in place given the lower factor from
/// [`cholesky_in_place`].
pub(crate) fn cholesky_solve_in_place(l: &[f64], k: usize, rhs: &mut [f64]) {
    for i in 0..k {
        let mut v = rhs[i];
        for p in 0..i {
            v -= l[i * k + p] * rhs[p];
        }
        rhs[i] = v / l[i * k + i];
    }
    for i in (0..k).rev() {
        let mut v = rhs[i];
        for p in (i + 1)..k {
            v -= l[p * k + i] * rhs[p];
        }
        rhs[i] = v / l[i * k + i];
    }
}

/// Draws `x ~ N(0, A^-1)` by solving `L^T x = z` for standard normal `z`,
/// given the lower Cholesky factor of the precision `A`.
pub(crate) fn precision_sample_in_place(l: &[f64], k: usize, z: &mut [f64]) {
    for i in (0..k).rev() {
        let mut v = z[i];
        for p in (i + 1)..k {
            v -= l[p * k + i] * z[p];
        }
        z[i] = v / l[i * k + i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn correlation_at_zero_distance_is_one() {
        for phi in [0.1, 1.0, 17.0] {
            assert_eq!(correlation(0.0, phi).unwrap(), 1.0);
        }
    }

    #[test]
    fn correlation_at_phi_is_inv_e() {
        let phi = 2.5;
        assert_relative_eq!(correlation(phi, phi).unwrap(), (-1.0f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(correlation(1.0, 1.0).unwrap(), 0.36787944117144233, epsilon = 1e-15);
    }

    #[test]
    fn correlation_rejects_nonpositive_range() {
        assert!(correlation(1.0, 0.0).is_err());
        assert!(correlation(1.0, -1.0).is_err());
    }

    #[test]
    fn single_point_graph() {
        let g = NngpGraph::build(DMatrix::from_row_slice(1, 2, &[0.3, -0.7]), 5).unwrap();
        assert!(g.neighbors[0].is_empty());
        let c = conditioning(0, &g, 1.0).unwrap();
        assert!(c.b.is_empty());
        assert_eq!(c.f, 1.0);
    }

    #[test]
    fn collinear_points_m1_neighbors() {
        // Points at 0, 1, 2 on a line; ordering is by coordinate, so the
        // second point conditions on the first and the third on the second.
        let g = NngpGraph::build(DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]), 1).unwrap();
        assert_eq!(g.order, vec![0, 1, 2]);
        assert_eq!(g.neighbors[0], Vec::<usize>::new());
        assert_eq!(g.neighbors[1], vec![0]);
        assert_eq!(g.neighbors[2], vec![1]);
    }

    #[test]
    fn saturated_m_gives_all_predecessors() {
        let mut rng = crate::rngutil::root(11);
        let pts = DMatrix::from_fn(8, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g = NngpGraph::build(pts, 7).unwrap();
        for (r, &i) in g.order.iter().enumerate() {
            assert_eq!(g.neighbors[i].len(), r);
            let mut expected: Vec<usize> = g.order[..r].to_vec();
            expected.sort_unstable();
            let mut got = g.neighbors[i].clone();
            got.sort_unstable();
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn single_neighbor_closed_form() {
        // Two points at distance 1, phi = 1: b = e^-1, f = 1 - e^-2.
        let g = NngpGraph::build(DMatrix::from_column_slice(2, 1, &[0.0, 1.0]), 1).unwrap();
        let second = g.order[1];
        let c = conditioning(second, &g, 1.0).unwrap();
        assert_eq!(c.b.len(), 1);
        assert_relative_eq!(c.b[0], 0.36787944117144233, epsilon = 1e-9);
        assert_relative_eq!(c.f, 1.0 - (-2.0f64).exp(), epsilon = 1e-9);
    }

    #[test]
    fn conditioning_matches_dense_schur_complement() {
        let mut rng = crate::rngutil::root(23);
        for trial in 0..50 {
            let n = 2 + (trial % 6);
            let d = 1 + (trial % 3);
            let pts = DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let phi = 0.2 + rng.gen::<f64>() * 3.0;
            let g = NngpGraph::build(pts, 5).unwrap();
            for i in 0..n {
                let c = conditioning(i, &g, phi).unwrap();
                let (b_ref, f_ref) =
                    oracle::schur_b_f(&g.nbr_dist[i], &g.nbr_cross[i], phi, NBR_JITTER);
                for (got, want) in c.b.iter().zip(b_ref.iter()) {
                    assert_relative_eq!(got, want, epsilon = 1e-10);
                }
                assert_relative_eq!(c.f, f_ref, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn full_conditioning_matches_dense_mvn() {
        let mut rng = crate::rngutil::root(31);
        let n = 20;
        let pts = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g = NngpGraph::build(pts.clone(), n - 1).unwrap();
        let tau2 = 1.7;
        let phi = 0.9;
        let mean = 0.4;
        let values: Vec<f64> =
            (0..n).map(|_| mean + rng.sample::<f64, _>(StandardNormal)).collect();
        let sparse = nngp_log_density(&values, mean, tau2, &g, phi).unwrap();
        let cov = oracle::dense_corr(&pts, phi) * tau2;
        let dense = oracle::mvn_logpdf(&values, mean, &cov);
        assert_relative_eq!(sparse, dense, epsilon = 1e-6);
    }

    #[test]
    fn log_density_translation_invariant() {
        let mut rng = crate::rngutil::root(37);
        let pts = DMatrix::from_fn(12, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let g = NngpGraph::build(pts, 4).unwrap();
        let values: Vec<f64> = (0..12).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let a = nngp_log_density(&values, 0.3, 1.2, &g, 0.8).unwrap();
        let shifted: Vec<f64> = values.iter().map(|v| v + 5.5).collect();
        let b = nngp_log_density(&shifted, 5.8, 1.2, &g, 0.8).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-9);
    }

    #[test]
    fn n1_log_density_is_single_gaussian() {
        let g = NngpGraph::build(DMatrix::from_row_slice(1, 1, &[0.0]), 1).unwrap();
        let tau2 = 2.0;
        let v = 0.7;
        let mean = 0.2;
        let got = nngp_log_density(&[v], mean, tau2, &g, 1.0).unwrap();
        let want = -0.5 * ((2.0 * std::f64::consts::PI * tau2).ln() + (v - mean).powi(2) / tau2);
        assert_relative_eq!(got, want, epsilon = 1e-12);
    }

    #[test]
    fn closer_single_neighbor_shrinks_f() {
        let g1 = NngpGraph::build(DMatrix::from_column_slice(2, 1, &[0.0, 0.5]), 1).unwrap();
        let g2 = NngpGraph::build(DMatrix::from_column_slice(2, 1, &[0.0, 1.5]), 1).unwrap();
        let c1 = conditioning(g1.order[1], &g1, 1.0).unwrap();
        let c2 = conditioning(g2.order[1], &g2, 1.0).unwrap();
        assert!(c1.f < c2.f);
    }

    proptest! {
        #[test]
        fn correlation_strictly_decreasing(d1 in 0.0f64..10.0, gap in 1e-6f64..10.0, phi in 0.05f64..20.0) {
            let c1 = correlation(d1, phi).unwrap();
            let c2 = correlation(d1 + gap, phi).unwrap();
            prop_assert!(c1 > c2);
            prop_assert!(c1 <= 1.0 && c2 > 0.0);
        }

        #[test]
        fn graph_children_transpose_and_f_in_unit(seed in 0u64..500, n in 1usize..24, m in 1usize..8) {
            let mut rng = crate::rngutil::root(seed);
            let pts = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let g = NngpGraph::build(pts, m).unwrap();
            // neighbor sets are predecessor subsets of the right size
            for (r, &i) in g.order.iter().enumerate() {
                prop_assert_eq!(g.neighbors[i].len(), m.min(r));
                for &nb in &g.neighbors[i] {
                    prop_assert!(g.rank[nb] < r);
                }
            }
            // children is the exact transpose relation
            let mut pairs_n = std::collections::BTreeSet::new();
            for t in 0..n {
                for (pos, &s) in g.neighbors[t].iter().enumerate() {
                    pairs_n.insert((s, t, pos));
                }
            }
            let mut pairs_c = std::collections::BTreeSet::new();
            for s in 0..n {
                for &(t, pos) in &g.children[s] {
                    prop_assert_eq!(g.neighbors[t][pos], s);
                    pairs_c.insert((s, t, pos));
                }
            }
            prop_assert_eq!(pairs_n, pairs_c);
            // f in (0, 1], with f == 1 exactly on empty sets
            for i in 0..n {
                let c = conditioning(i, &g, 0.7).unwrap();
                prop_assert!(c.f > 0.0 && c.f <= 1.0);
                if g.neighbors[i].is_empty() {
                    prop_assert_eq!(c.f, 1.0);
                }
            }
        }
    }
}
