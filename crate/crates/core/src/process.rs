//! The sparse process over the reference set.
//!
//! Each reference point is written as a linear combination of its neighbors
//! plus independent noise, `w_i = a_i' w_N(i) + eta_i` with
//! `eta_i ~ N(0, f_i)`. The joint density is the product of these
//! conditionals and the precision matrix is `V' F^-1 V`, where `V` is unit
//! lower triangular with `-a_i` in row `i` and `F = diag(f)`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::covariance::{CovarianceParams, Kernel, ReferenceCovariance};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_in_place, cholesky_solve, dot};
use crate::neighbors::{PredictionCandidates, NeighborTable};
use crate::spacetime::{ReferenceSet, SpaceTimePoint};

const LN_2PI: f64 = 1.8378770664093453;

/// Relative diagonal jitter tried once when a neighbor covariance is not
/// numerically positive definite.
pub const JITTER: f64 = 1e-10;

const CHUNK: usize = 128;

/// Regression weights and conditional variances for every reference point.
#[derive(Debug, Clone)]
pub struct SparseFactors {
    params: CovarianceParams,
    table: Arc<NeighborTable>,
    offsets: Vec<usize>,
    weights: Vec<f64>,
    cond_var: Vec<f64>,
}

/// Solves for the kriging weights of a target on `n` neighbors.
///
/// `nn(a, b)` is the covariance between neighbors `a` and `b`, `nt(a)` the
/// covariance between neighbor `a` and the target and `var` the target
/// variance. Returns `(weights, conditional variance)`.
pub(crate) fn conditional<F, G>(n: usize, var: f64, nn: F, nt: G) -> Result<(Vec<f64>, f64)>
where
    F: Fn(usize, usize) -> f64,
    G: Fn(usize) -> f64,
{
    if n == 0 {
        return Ok((Vec::new(), var));
    }
    let mut cm = vec![0.0; n * n];
    let fill = |cm: &mut [f64], jitter: f64| {
        for a in 0..n {
            for b in 0..a {
                cm[a * n + b] = nn(a, b);
            }
            cm[a * n + a] = nn(a, a) + jitter;
        }
    };
    fill(&mut cm, 0.0);
    if !cholesky_in_place(&mut cm, n) {
        fill(&mut cm, JITTER * var);
        if !cholesky_in_place(&mut cm, n) {
            return Err(Error::NotPositiveDefinite(format!(
                "covariance of {n} neighbors stays singular after jitter"
            )));
        }
    }
    let rhs: Vec<f64> = (0..n).map(nt).collect();
    let mut w = rhs.clone();
    cholesky_solve(&cm, n, &mut w);
    let f = var - dot(&rhs, &w);
    if !(f > 0.0) || !f.is_finite() {
        return Err(Error::NotPositiveDefinite(format!("conditional variance {f:e} is not positive")));
    }
    Ok((w, f))
}

/// Computes `a_i` and `f_i` for every reference point.
pub fn compute_factors(
    reference: &ReferenceSet,
    table: &Arc<NeighborTable>,
    params: &CovarianceParams,
) -> Result<SparseFactors> {
    if table.len() != reference.len() {
        return Err(Error::Dimension { expected: reference.len(), got: table.len() });
    }
    let rc = ReferenceCovariance::new(reference, params)?;
    factors_with(&rc, table)
}

pub(crate) fn factors_with(rc: &ReferenceCovariance<'_>, table: &Arc<NeighborTable>) -> Result<SparseFactors> {
    let r = table.len();
    let var = rc.kernel().sigma2();
    let chunks: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..r.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut weights = Vec::new();
            let mut fs = Vec::with_capacity(CHUNK);
            for i in c * CHUNK..((c + 1) * CHUNK).min(r) {
                let nb = table.neighbors(i);
                let (w, f) = conditional(
                    nb.len(),
                    var,
                    |a, b| rc.between(nb[a] as usize, nb[b] as usize),
                    |a| rc.between(nb[a] as usize, i),
                )
                .map_err(|e| match e {
                    Error::NotPositiveDefinite(msg) => Error::NotPositiveDefinite(format!("point {i}: {msg}")),
                    e => e,
                })?;
                weights.extend_from_slice(&w);
                fs.push(f);
            }
            Ok((weights, fs))
        })
        .collect();
    let mut weights = Vec::with_capacity(table.total_neighbors());
    let mut cond_var = Vec::with_capacity(r);
    for c in chunks {
        let (w, f) = c?;
        weights.extend_from_slice(&w);
        cond_var.extend_from_slice(&f);
    }
    let mut offsets = Vec::with_capacity(r + 1);
    offsets.push(0);
    for i in 0..r {
        offsets.push(offsets[i] + table.neighbors(i).len());
    }
    Ok(SparseFactors { params: *rc.kernel().params(), table: Arc::clone(table), offsets, weights, cond_var })
}

impl SparseFactors {
    pub fn len(&self) -> usize {
        self.cond_var.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cond_var.is_empty()
    }

    pub fn params(&self) -> &CovarianceParams {
        &self.params
    }

    pub fn table(&self) -> &Arc<NeighborTable> {
        &self.table
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[u32] {
        self.table.neighbors(i)
    }

    /// `a_i`, aligned with `neighbors(i)`.
    #[inline]
    pub fn weights(&self, i: usize) -> &[f64] {
        &self.weights[self.offsets[i]..self.offsets[i + 1]]
    }

    #[inline]
    pub(crate) fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    #[inline]
    pub(crate) fn flat_weights(&self) -> &[f64] {
        &self.weights
    }

    /// `f_i`.
    #[inline]
    pub fn cond_var(&self, i: usize) -> f64 {
        self.cond_var[i]
    }

    pub fn cond_vars(&self) -> &[f64] {
        &self.cond_var
    }

    /// Conditional mean `a_i' w_N(i)`.
    #[inline]
    pub fn cond_mean(&self, i: usize, w: &[f64]) -> f64 {
        self.neighbors(i).iter().zip(self.weights(i)).map(|(&j, a)| a * w[j as usize]).sum()
    }

    /// `log det K = sum_i log f_i`.
    pub fn log_det(&self) -> f64 {
        self.cond_var.iter().map(|f| f.ln()).sum()
    }

    /// Heap memory held by the factors and their neighbor table.
    pub fn heap_bytes(&self) -> usize {
        (self.offsets.capacity() + self.weights.capacity() + self.cond_var.capacity()) * 8 + self.table.heap_bytes()
    }

    /// Column `j` of `K`, the covariance implied by the factors. `O(r m)`.
    pub fn cov_column(&self, j: usize) -> Vec<f64> {
        let r = self.len();
        // x = V'^-1 e_j
        let mut x = vec![0.0; r];
        x[j] = 1.0;
        for i in (0..=j).rev() {
            let xi = x[i];
            if xi != 0.0 {
                for (&k, a) in self.neighbors(i).iter().zip(self.weights(i)) {
                    x[k as usize] += a * xi;
                }
            }
        }
        // y = V^-1 F x
        let mut y = vec![0.0; r];
        for i in 0..r {
            y[i] = self.cond_var[i] * x[i] + self.cond_mean(i, &y);
        }
        y
    }

    /// Dense `K`. Intended for tests and small problems.
    pub fn dense_cov(&self) -> DMatrix<f64> {
        let r = self.len();
        let mut k = DMatrix::zeros(r, r);
        for j in 0..r {
            let col = self.cov_column(j);
            k.column_mut(j).copy_from_slice(&col);
        }
        k
    }
}

/// `log p(w | theta)` under the sparse process.
pub fn log_prior_density(w: &[f64], factors: &SparseFactors) -> Result<f64> {
    if w.len() != factors.len() {
        return Err(Error::Dimension { expected: factors.len(), got: w.len() });
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("w has non-finite entries".into()));
    }
    let r = w.len();
    let partial: Vec<f64> = (0..r.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            (c * CHUNK..((c + 1) * CHUNK).min(r))
                .map(|i| {
                    let f = factors.cond_var(i);
                    let e = w[i] - factors.cond_mean(i, w);
                    -0.5 * (LN_2PI + f.ln() + e * e / f)
                })
                .sum::<f64>()
        })
        .collect();
    Ok(partial.iter().sum())
}

/// `K^-1` in compressed-row form.
#[derive(Debug, Clone)]
pub struct PrecisionView {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
    log_det_cov: f64,
}

/// Assembles `K^-1 = V' F^-1 V`.
pub fn assemble_precision(factors: &SparseFactors) -> PrecisionView {
    let r = factors.len();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); r];
    for i in 0..r {
        // row i of V as (column, value)
        let mut v: Vec<(usize, f64)> = vec![(i, 1.0)];
        v.extend(factors.neighbors(i).iter().zip(factors.weights(i)).map(|(&j, &a)| (j as usize, -a)));
        let finv = 1.0 / factors.cond_var(i);
        for &(p, vp) in &v {
            for &(q, vq) in &v {
                rows[p].push((q, vp * vq * finv));
            }
        }
    }
    let mut row_ptr = vec![0];
    let mut cols = Vec::new();
    let mut values = Vec::new();
    for mut row in rows {
        row.sort_by_key(|e| e.0);
        for (q, v) in row {
            if cols.len() > *row_ptr.last().unwrap() && *cols.last().unwrap() == q {
                *values.last_mut().unwrap() += v;
            } else {
                cols.push(q);
                values.push(v);
            }
        }
        row_ptr.push(cols.len());
    }
    PrecisionView { n: r, row_ptr, cols, values, log_det_cov: factors.log_det() }
}

impl PrecisionView {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored nonzeros.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.cols[lo..hi].binary_search(&j) {
            Ok(k) => self.values[lo + k],
            Err(_) => 0.0,
        }
    }

    /// Iterates over `(row, col, value)`.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (i, self.cols[k], self.values[k]))
        })
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (self.row_ptr[i]..self.row_ptr[i + 1]).map(|k| self.values[k] * x[self.cols[k]]).sum())
            .collect()
    }

    /// `log det K` (of the covariance, not the precision).
    pub fn log_det_cov(&self) -> f64 {
        self.log_det_cov
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.triplets() {
            m[(i, j)] = v;
        }
        m
    }
}

/// Ancestral draw `w ~ N(0, K)`.
pub fn sample_prior(factors: &SparseFactors, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_prior_with(factors, &mut rng)
}

pub fn sample_prior_with<R: Rng + ?Sized>(factors: &SparseFactors, rng: &mut R) -> Vec<f64> {
    let r = factors.len();
    let mut w = vec![0.0; r];
    for i in 0..r {
        let z: f64 = rng.sample(StandardNormal);
        w[i] = factors.cond_mean(i, &w) + factors.cond_var(i).sqrt() * z;
    }
    w
}

/// Neighbors, weights and conditional variance of a point outside the
/// reference set.
#[derive(Debug, Clone, PartialEq)]
pub struct PointFactors {
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
    pub cond_var: f64,
}

impl PointFactors {
    pub fn cond_mean(&self, w: &[f64]) -> f64 {
        self.neighbors.iter().zip(&self.weights).map(|(&j, a)| a * w[j]).sum()
    }
}

/// Factors of `p` conditioned on the given reference neighbors.
pub fn point_factors_on(
    p: &SpaceTimePoint,
    neighbors: Vec<usize>,
    reference: &ReferenceSet,
    kernel: &Kernel,
) -> Result<PointFactors> {
    let pts: Vec<SpaceTimePoint> = neighbors.iter().map(|&j| reference.point(j)).collect();
    let (weights, cond_var) = conditional(
        pts.len(),
        kernel.sigma2(),
        |a, b| kernel.cov_points(&pts[a], &pts[b]),
        |a| kernel.cov_points(&pts[a], p),
    )?;
    Ok(PointFactors { neighbors, weights, cond_var })
}

/// Factors of `p` with neighbors chosen by the scheme of `table`.
pub fn point_factors(
    p: &SpaceTimePoint,
    reference: &ReferenceSet,
    table: &NeighborTable,
    params: &CovarianceParams,
) -> Result<PointFactors> {
    let kernel = Kernel::new(params)?;
    let cands = PredictionCandidates::new(p, reference, table.scheme(), table.m())?;
    point_factors_on(p, cands.select(p, reference, &kernel), reference, &kernel)
}

/// Covariance of the sparse process between two arbitrary points.
pub fn induced_cov(
    la: &SpaceTimePoint,
    lb: &SpaceTimePoint,
    factors: &SparseFactors,
    reference: &ReferenceSet,
) -> Result<f64> {
    let params = *factors.params();
    let side = |p: &SpaceTimePoint| -> Result<std::result::Result<usize, PointFactors>> {
        match reference.locate(p) {
            Some(i) => Ok(Ok(i)),
            None => Ok(Err(point_factors(p, reference, factors.table(), &params)?)),
        }
    };
    let a = side(la)?;
    let b = side(lb)?;
    Ok(match (a, b) {
        (Ok(i), Ok(j)) => factors.cov_column(j)[i],
        (Ok(i), Err(pb)) | (Err(pb), Ok(i)) => {
            let col = factors.cov_column(i);
            pb.neighbors.iter().zip(&pb.weights).map(|(&k, w)| w * col[k]).sum()
        }
        (Err(pa), Err(pb)) => {
            let mut s = 0.0;
            for (&k, wb) in pb.neighbors.iter().zip(&pb.weights) {
                let col = factors.cov_column(k);
                s += wb * pa.cond_mean(&col);
            }
            if la == lb {
                s += pa.cond_var;
            }
            s
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::cross_cov_matrix;
    use crate::neighbors::{adaptive_table, simple_neighbors};

    fn grid(n: usize, nt: usize) -> ReferenceSet {
        let step = 1.0 / (n - 1) as f64;
        let mut locs = Vec::new();
        for i in 0..n {
            for j in 0..n {
                locs.push(vec![i as f64 * step, j as f64 * step]);
            }
        }
        let times: Vec<f64> = (0..nt).map(|k| k as f64 / (nt - 1) as f64).collect();
        ReferenceSet::enumerate(&locs, &times).unwrap()
    }

    fn dataset1() -> CovarianceParams {
        CovarianceParams::exponential(1.0, 50.0, 25.0, 0.75).unwrap()
    }

    /// `K` from the sequential conditionals by explicit dense algebra: each
    /// new column is `K_{:,N} C_NN^-1 C_Ni` and the diagonal adds `f_i`.
    fn dense_conditional_oracle(r: &ReferenceSet, t: &NeighborTable, th: &CovarianceParams) -> DMatrix<f64> {
        let c = cross_cov_matrix(&r.points(), &r.points(), th).unwrap();
        let n = r.len();
        let mut k = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            let nb: Vec<usize> = t.neighbors(i).iter().map(|&j| j as usize).collect();
            if nb.is_empty() {
                k[(i, i)] = th.sigma2;
                continue;
            }
            let cnn = DMatrix::from_fn(nb.len(), nb.len(), |a, b| c[(nb[a], nb[b])]);
            let cni = DMatrix::from_fn(nb.len(), 1, |a, _| c[(nb[a], i)]);
            let a = cnn.clone().lu().solve(&cni).unwrap();
            let f = th.sigma2 - (cni.transpose() * &a)[(0, 0)];
            for j in 0..i {
                let v: f64 = nb.iter().enumerate().map(|(q, &l)| a[(q, 0)] * k[(l, j)]).sum();
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            let kn = DMatrix::from_fn(nb.len(), nb.len(), |p, q| k[(nb[p], nb[q])]);
            k[(i, i)] = (a.transpose() * kn * &a)[(0, 0)] + f;
        }
        k
    }

    fn dense_logdensity(w: &[f64], c: &DMatrix<f64>) -> f64 {
        let n = w.len();
        let ch = c.clone().cholesky().unwrap();
        let wv = nalgebra::DVector::from_column_slice(w);
        let sol = ch.solve(&wv);
        let logdet = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        -0.5 * (n as f64 * LN_2PI + logdet + wv.dot(&sol))
    }

    #[test]
    fn first_point_has_marginal_variance() {
        let r = grid(3, 3);
        let t = Arc::new(simple_neighbors(&r, 4).unwrap());
        let f = compute_factors(&r, &t, &dataset1()).unwrap();
        assert!(f.weights(0).is_empty());
        assert_eq!(f.cond_var(0), 1.0);
        assert!(f.cond_vars().iter().all(|&v| v <= 1.0 && v > 0.0));
    }

    #[test]
    fn single_neighbor_is_bivariate_conditioning() {
        let r = ReferenceSet::enumerate(&[vec![0.0], vec![0.1]], &[0.0]).unwrap();
        let t = Arc::new(NeighborTable::full_history(2));
        let th = CovarianceParams::exponential(2.0, 1.0, 3.0, 0.5).unwrap();
        let f = compute_factors(&r, &t, &th).unwrap();
        let rho = (-3.0f64 * 0.1).exp();
        assert!((f.weights(1)[0] - rho).abs() < 1e-14);
        assert!((f.cond_var(1) - 2.0 * (1.0 - rho * rho)).abs() < 1e-14);
    }

    #[test]
    fn weights_solve_neighbor_system() {
        let r = grid(4, 4);
        let th = dataset1();
        let t = Arc::new(adaptive_table(&r, &th, 9).unwrap());
        let f = compute_factors(&r, &t, &th).unwrap();
        let k = Kernel::new(&th).unwrap();
        for i in 0..r.len() {
            let nb = f.neighbors(i);
            let a = f.weights(i);
            for &jp in nb {
                let lhs: f64 = nb
                    .iter()
                    .zip(a)
                    .map(|(&jq, aq)| aq * k.cov_points(&r.point(jp as usize), &r.point(jq as usize)))
                    .sum();
                let rhs = k.cov_points(&r.point(jp as usize), &r.point(i));
                assert!((lhs - rhs).abs() <= 1e-8 * rhs.abs().max(1e-300) + 1e-15);
            }
        }
    }

    #[test]
    fn factors_reproduce_sequential_conditioning() {
        let r = grid(4, 4);
        let th = dataset1();
        let t = Arc::new(adaptive_table(&r, &th, 9).unwrap());
        let f = compute_factors(&r, &t, &th).unwrap();
        let oracle = dense_conditional_oracle(&r, &t, &th);
        let k = f.dense_cov();
        let diff = (&k - &oracle).abs().max();
        assert!(diff <= 1e-8, "max diff {diff:e}");
        let q = assemble_precision(&f).to_dense();
        let kinv = oracle.clone().cholesky().unwrap().inverse();
        let qdiff = (&q - &kinv).abs().max() / kinv.abs().max();
        assert!(qdiff <= 1e-6, "{qdiff:e}");
    }

    #[test]
    fn saturated_factors_are_exact() {
        let r = grid(3, 4);
        let th = CovarianceParams::exponential(1.3, 5.0, 4.0, 0.5).unwrap();
        let t = Arc::new(NeighborTable::full_history(r.len()));
        let f = compute_factors(&r, &t, &th).unwrap();
        let c = cross_cov_matrix(&r.points(), &r.points(), &th).unwrap();
        assert!((f.dense_cov() - &c).abs().max() <= 1e-8);
        let w = sample_prior(&f, 5);
        let got = log_prior_density(&w, &f).unwrap();
        assert!((got - dense_logdensity(&w, &c)).abs() <= 1e-6);
        let q = assemble_precision(&f);
        let ch = c.clone().cholesky().unwrap();
        let logdet = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        assert!((q.log_det_cov() - logdet).abs() <= 1e-6);
    }

    #[test]
    fn zero_field_density() {
        let r = grid(3, 3);
        let th = dataset1();
        let t = Arc::new(simple_neighbors(&r, 4).unwrap());
        let f = compute_factors(&r, &t, &th).unwrap();
        let w = vec![0.0; r.len()];
        let want: f64 = f.cond_vars().iter().map(|v| -0.5 * (LN_2PI + v.ln())).sum();
        assert!((log_prior_density(&w, &f).unwrap() - want).abs() < 1e-12);
        let w1 = sample_prior(&f, 1);
        let w2: Vec<f64> = w1.iter().map(|v| 2.0 * v).collect();
        assert!(log_prior_density(&w2, &f).unwrap() < log_prior_density(&w1, &f).unwrap());
        assert!(log_prior_density(&w[1..], &f).is_err());
    }

    #[test]
    fn precision_structure() {
        let r = ReferenceSet::enumerate(&[vec![0.0]], &[0.0]).unwrap();
        let t = Arc::new(NeighborTable::empty(1));
        let th = CovarianceParams::exponential(2.5, 1.0, 1.0, 0.5).unwrap();
        let q = assemble_precision(&compute_factors(&r, &t, &th).unwrap());
        assert_eq!(q.nnz(), 1);
        assert!((q.get(0, 0) - 0.4).abs() < 1e-15);

        let r = grid(4, 4);
        let th = dataset1();
        for m in [4, 9] {
            let t = Arc::new(simple_neighbors(&r, m).unwrap());
            let q = assemble_precision(&compute_factors(&r, &t, &th).unwrap());
            assert!(q.nnz() <= (m + 1) * (m + 1) * r.len());
            for (i, j, v) in q.triplets() {
                assert!((q.get(j, i) - v).abs() <= 1e-12 * v.abs());
            }
            assert!(q.to_dense().cholesky().is_some());
        }
    }

    #[test]
    fn prior_draws_are_reproducible_and_iid_without_neighbors() {
        let r = grid(3, 3);
        let th = dataset1();
        let t = Arc::new(simple_neighbors(&r, 4).unwrap());
        let f = compute_factors(&r, &t, &th).unwrap();
        assert_eq!(sample_prior(&f, 9), sample_prior(&f, 9));
        assert_ne!(sample_prior(&f, 9), sample_prior(&f, 10));

        let t0 = Arc::new(NeighborTable::empty(r.len()));
        let f0 = compute_factors(&r, &t0, &th).unwrap();
        assert!(f0.cond_vars().iter().all(|&v| v == th.sigma2));
    }

    #[test]
    fn prior_draws_match_implied_covariance() {
        let r = grid(3, 3);
        let th = CovarianceParams::exponential(1.0, 5.0, 3.0, 0.5).unwrap();
        let t = Arc::new(simple_neighbors(&r, 4).unwrap());
        let f = compute_factors(&r, &t, &th).unwrap();
        let k = f.dense_cov();
        let idx = [4usize, 13, 22];
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut s = [[0.0f64; 3]; 3];
        let mut s2 = [[0.0f64; 3]; 3];
        for _ in 0..n {
            let w = sample_prior_with(&f, &mut rng);
            for a in 0..3 {
                for b in 0..3 {
                    let v = w[idx[a]] * w[idx[b]];
                    s[a][b] += v;
                    s2[a][b] += v * v;
                }
            }
        }
        for a in 0..3 {
            for b in 0..3 {
                let mean = s[a][b] / n as f64;
                let se = ((s2[a][b] / n as f64 - mean * mean) / n as f64).sqrt();
                assert!((mean - k[(idx[a], idx[b])]).abs() <= 3.0 * se, "{a},{b}");
            }
        }
    }

    #[test]
    fn induced_covariance_cases() {
        let r = grid(3, 3);
        let th = dataset1();
        let t = Arc::new(adaptive_table(&r, &th, 4).unwrap());
        let f = compute_factors(&r, &t, &th).unwrap();
        let k = f.dense_cov();
        let p0 = r.point(0);
        assert!((induced_cov(&p0, &p0, &f, &r).unwrap() - th.sigma2).abs() < 1e-14);
        for (i, j) in [(1, 5), (7, 20), (26, 26)] {
            let v = induced_cov(&r.point(i), &r.point(j), &f, &r).unwrap();
            assert!((v - k[(i, j)]).abs() <= 1e-8);
        }
        let off = SpaceTimePoint::new(&[0.3, 0.6], 0.7).unwrap();
        let v = induced_cov(&off, &off, &f, &r).unwrap();
        assert!(v > 0.0);
        let pf = point_factors(&off, &r, &t, &th).unwrap();
        let want = {
            let kn = DMatrix::from_fn(pf.neighbors.len(), pf.neighbors.len(), |a, b| k[(pf.neighbors[a], pf.neighbors[b])]);
            let a = nalgebra::DVector::from_column_slice(&pf.weights);
            a.dot(&(kn * &a)) + pf.cond_var
        };
        assert!((v - want).abs() < 1e-12);
        let q = r.point(13);
        let cross = induced_cov(&off, &q, &f, &r).unwrap();
        let want: f64 = pf.neighbors.iter().zip(&pf.weights).map(|(&j, a)| a * k[(j, 13)]).sum();
        assert!((cross - want).abs() < 1e-12);
        assert!((induced_cov(&q, &off, &f, &r).unwrap() - cross).abs() < 1e-15);
    }

    #[test]
    fn factor_computation_is_thread_count_invariant() {
        let r = grid(6, 6);
        let th = dataset1();
        let t = Arc::new(adaptive_table(&r, &th, 9).unwrap());
        let run = |n| {
            rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(|| {
                let f = compute_factors(&r, &t, &th).unwrap();
                let w = sample_prior(&f, 3);
                (f.cond_vars().to_vec(), log_prior_density(&w, &f).unwrap())
            })
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }
}
