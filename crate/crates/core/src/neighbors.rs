//! Neighbor sets for the sparse conditional factorization.
//!
//! Two schemes are provided:
//!
//! - **simple**: parameter-free sets built from the `sqrt(m)` nearest sites at
//!   the current and the `sqrt(m) - 1` previous times;
//! - **adaptive**: the `m` history points most correlated with the target
//!   under the current covariance parameters, searched only inside a
//!   parameter-free *eligible set*.
//!
//! A history point `p` is eligible for target `i` when its dominance rectangle
//! (the history points with spatial lag `<= h_p` and temporal lag `<= u_p`)
//! holds at most `m` points. Under a naturally monotone covariance every
//! point of that rectangle is at least as correlated with `i` as `p` is, so a
//! point with more than `m` such points can never make the top `m`. Points
//! whose lags tie exactly with `p` are only counted when they precede `p` in
//! the enumeration, matching the index tie-break used when ranking.
//!
//! Lags within a relative `1e-12` of each other are treated as tied.

use std::cmp::Ordering;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceParams, Kernel, ReferenceCovariance};
use crate::error::{Error, Result};
use crate::spacetime::{site_distance, ReferenceSet, Site, SpaceTimePoint};

const TIE_RTOL: f64 = 1e-12;

#[inline]
fn tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= TIE_RTOL * a.abs().max(b.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Simple,
    Adaptive,
}

/// Ragged index lists in compressed-row form.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Ragged {
    offsets: Vec<usize>,
    items: Vec<u32>,
}

impl Ragged {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        offsets.push(0);
        let mut items = Vec::new();
        for l in lists {
            items.extend(l.iter().map(|&j| j as u32));
            offsets.push(items.len());
        }
        Ragged { offsets, items }
    }

    /// Builds lists `0..n` in parallel; the output does not depend on the
    /// number of worker threads.
    pub(crate) fn build<F>(n: usize, f: F) -> Self
    where
        F: Fn(usize, &mut Vec<u32>) + Sync,
    {
        const CHUNK: usize = 256;
        let chunks: Vec<(Vec<usize>, Vec<u32>)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut lens = Vec::with_capacity(CHUNK);
                let mut items = Vec::new();
                for i in (c * CHUNK)..((c + 1) * CHUNK).min(n) {
                    let before = items.len();
                    f(i, &mut items);
                    lens.push(items.len() - before);
                }
                (lens, items)
            })
            .collect();
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let total: usize = chunks.iter().map(|c| c.1.len()).sum();
        let mut items = Vec::with_capacity(total);
        for (lens, chunk_items) in chunks {
            for l in lens {
                offsets.push(offsets.last().unwrap() + l);
            }
            items.extend(chunk_items);
        }
        Ragged { offsets, items }
    }

    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> &[u32] {
        &self.items[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn total(&self) -> usize {
        self.items.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u32]> {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn to_lists(&self) -> Vec<Vec<usize>> {
        self.iter().map(|l| l.iter().map(|&j| j as usize).collect()).collect()
    }

    pub fn heap_bytes(&self) -> usize {
        self.offsets.capacity() * std::mem::size_of::<usize>() + self.items.capacity() * std::mem::size_of::<u32>()
    }
}

/// Parameter-free eligible sets `E(i)` for every reference point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EligibleSets {
    m: usize,
    sets: Ragged,
}

impl EligibleSets {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, i: usize) -> &[u32] {
        self.sets.get(i)
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    pub fn mean_size(&self) -> f64 {
        if self.sets.is_empty() {
            0.0
        } else {
            self.sets.total() as f64 / self.sets.len() as f64
        }
    }

    pub fn to_lists(&self) -> Vec<Vec<usize>> {
        self.sets.to_lists()
    }
}

/// Neighbor sets `N(i)` for every reference point.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    m: usize,
    scheme: Scheme,
    sets: Ragged,
    eligible: Option<Arc<EligibleSets>>,
}

impl NeighborTable {
    /// A table from explicit sets. Every neighbor must precede its target.
    /// The table is treated as parameter-free and reports [`Scheme::Simple`].
    pub fn from_sets(sets: &[Vec<usize>]) -> Result<Self> {
        for (i, s) in sets.iter().enumerate() {
            if let Some(&j) = s.iter().find(|&&j| j >= i) {
                return Err(Error::InvalidInput(format!("neighbor {j} of point {i} is not in its history")));
            }
        }
        let m = sets.iter().map(Vec::len).max().unwrap_or(0);
        Ok(NeighborTable { m, scheme: Scheme::Simple, sets: Ragged::from_lists(sets), eligible: None })
    }

    /// Every point conditioned on its whole history; the factorization is then
    /// exact.
    pub fn full_history(r: usize) -> Self {
        let lists: Vec<Vec<usize>> = (0..r).map(|i| (0..i).collect()).collect();
        let mut t = Self::from_sets(&lists).expect("history sets are valid");
        t.m = r.saturating_sub(1);
        t
    }

    /// No neighbors at all: independent points.
    pub fn empty(r: usize) -> Self {
        NeighborTable { m: 0, scheme: Scheme::Simple, sets: Ragged::from_lists(&vec![Vec::new(); r]), eligible: None }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Whether the sets depend on the covariance parameters.
    pub fn is_adaptive(&self) -> bool {
        self.eligible.is_some()
    }

    pub fn eligible(&self) -> Option<&Arc<EligibleSets>> {
        self.eligible.as_ref()
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    #[inline]
    pub fn neighbors(&self, i: usize) -> &[u32] {
        self.sets.get(i)
    }

    pub fn max_set_size(&self) -> usize {
        self.sets.iter().map(<[u32]>::len).max().unwrap_or(0)
    }

    pub fn total_neighbors(&self) -> usize {
        self.sets.total()
    }

    pub fn to_lists(&self) -> Vec<Vec<usize>> {
        self.sets.to_lists()
    }

    pub fn heap_bytes(&self) -> usize {
        self.sets.heap_bytes()
    }

    /// Rebuilds adaptive sets under new parameters; parameter-free tables are
    /// returned unchanged.
    pub fn refreshed(&self, reference: &ReferenceSet, params: &CovarianceParams) -> Result<Self> {
        match &self.eligible {
            Some(e) => adaptive_neighbors(e, reference, params, self.m),
            None => Ok(self.clone()),
        }
    }

    /// Writes the sets as CSV with columns `i, rank, j` (rank starts at 1).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_ragged_csv(&self.sets, w)
    }
}

impl EligibleSets {
    /// Writes the sets as CSV with columns `i, rank, j`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        write_ragged_csv(&self.sets, w)
    }
}

fn write_ragged_csv<W: Write>(sets: &Ragged, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["i", "rank", "j"])?;
    for (i, s) in sets.iter().enumerate() {
        for (rank, &j) in s.iter().enumerate() {
            wr.write_record([i.to_string(), (rank + 1).to_string(), j.to_string()])?;
        }
    }
    wr.flush()?;
    Ok(())
}

fn perfect_sqrt(m: usize) -> Option<usize> {
    let s = (m as f64).sqrt().round() as usize;
    (s * s == m).then_some(s)
}

/// One entry of a ranking by lag: the item index, the 1-based rank
/// and the half-open rank range `[group_start, group_end)` of its tie group.
/// Ties (within tolerance) are ordered by item index.
#[derive(Debug, Clone, Copy)]
struct Ranked {
    index: usize,
    rank: usize,
    group_start: usize,
    group_end: usize,
}

/// Ranks the sites in `candidates` by distance to `target`. Every tie group
/// that starts at a rank `<= keep` is returned complete.
fn rank_sites(sites: &[Site], target: &Site, candidates: std::ops::Range<usize>, keep: usize) -> Vec<Ranked> {
    let mut all: Vec<(f64, usize)> = candidates.map(|s| (site_distance(&sites[s], target), s)).collect();
    if keep == 0 || all.is_empty() {
        return Vec::new();
    }
    if all.len() > keep {
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1));
        all.select_nth_unstable_by(keep - 1, cmp);
        let bound = all[keep - 1].0;
        let cut = bound + 2.0 * TIE_RTOL * bound.abs();
        all.retain(|&(d, _)| d <= cut);
    }
    rank_pairs(all, keep)
}

/// Sorts `(value, index)` pairs by value, groups tolerance ties and orders
/// each group by index. Groups starting after rank `keep` are dropped.
fn rank_pairs(mut all: Vec<(f64, usize)>, keep: usize) -> Vec<Ranked> {
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out = Vec::with_capacity(keep.min(all.len()));
    let mut start = 0;
    while start < all.len() && start < keep {
        let anchor = all[start].0;
        let mut end = start + 1;
        while end < all.len() && tied(all[end].0, anchor) {
            end += 1;
        }
        all[start..end].sort_by_key(|p| p.1);
        for (pos, &(_, index)) in all[start..end].iter().enumerate() {
            out.push(Ranked { index, rank: start + pos + 1, group_start: start, group_end: end });
        }
        start = end;
    }
    out
}

/// Simple neighbor sets: for the point at site `s_i` and time `t_j`, the
/// `sqrt(m)` nearest sites (among all sites) at each of the `sqrt(m) - 1`
/// previous times, plus the `sqrt(m)` nearest earlier-indexed sites at `t_j`.
/// A site is its own nearest neighbor. Distance ties go to the smaller site
/// index.
pub fn simple_neighbors(reference: &ReferenceSet, m: usize) -> Result<NeighborTable> {
    let q = perfect_sqrt(m).ok_or_else(|| Error::NeighborBudget(format!("m = {m} is not a perfect square")))?;
    let r = reference.len();
    if m >= r {
        return Err(Error::NeighborBudget(format!("m = {m} must be smaller than r = {r}")));
    }
    let sites = reference.sites();
    let n = sites.len();
    let nearest = |s: usize, range: std::ops::Range<usize>| -> Vec<usize> {
        rank_sites(sites, &sites[s], range, q).iter().filter(|e| e.rank <= q).map(|e| e.index).collect()
    };
    let nearest_all: Vec<Vec<usize>> = (0..n).into_par_iter().map(|s| nearest(s, 0..n)).collect();
    let nearest_earlier: Vec<Vec<usize>> = (0..n).into_par_iter().map(|s| nearest(s, 0..s)).collect();
    let sets = Ragged::build(r, |i, out| {
        let (s, k) = (reference.site_of(i), reference.time_of(i));
        out.extend(nearest_earlier[s].iter().map(|&j| reference.index(j, k) as u32));
        for back in 1..q.min(k + 1) {
            out.extend(nearest_all[s].iter().map(|&j| reference.index(j, k - back) as u32));
        }
    });
    Ok(NeighborTable { m, scheme: Scheme::Simple, sets, eligible: None })
}

/// Eligible sets `E(i)` for every reference point and budget `m`.
///
/// For the target at site `s` and time index `k`, the history splits into the
/// earlier sites at time `k` and the full site set at each earlier time. The
/// dominance count of the candidate at site `x` and time `k - n` is then
/// `c0(h_x) + (n - 1) cS(h_x) + rank(x)`, where `c0` counts earlier sites at
/// time `k` within distance `h_x`, `cS` counts all sites within `h_x` and
/// `rank` is the tie-aware rank of `x` among all sites. Same-time candidates
/// are eligible exactly when they rank among the `m` nearest earlier sites.
pub fn build_eligible_sets(reference: &ReferenceSet, m: usize) -> Result<EligibleSets> {
    if m == 0 {
        return Err(Error::NeighborBudget("m must be at least 1".into()));
    }
    let sites = reference.sites();
    let n = sites.len();

    struct SiteInfo {
        /// (site, rank, cS, c0) for sites of rank <= m.
        near: Vec<(usize, usize, usize, usize)>,
        /// The m nearest earlier-indexed sites.
        earlier: Vec<usize>,
    }

    let info: Vec<SiteInfo> = (0..n)
        .into_par_iter()
        .map(|s| {
            let ranked = rank_sites(sites, &sites[s], 0..n, m);
            let near = ranked
                .iter()
                .filter(|e| e.rank <= m)
                .map(|e| {
                    let c0 = ranked[..e.group_end].iter().filter(|x| x.index < s).count();
                    (e.index, e.rank, e.group_end, c0)
                })
                .collect();
            let earlier =
                rank_sites(sites, &sites[s], 0..s, m).iter().filter(|e| e.rank <= m).map(|e| e.index).collect();
            SiteInfo { near, earlier }
        })
        .collect();

    let sets = Ragged::build(reference.len(), |i, out| {
        let (s, k) = (reference.site_of(i), reference.time_of(i));
        let start = out.len();
        let si = &info[s];
        out.extend(si.earlier.iter().map(|&j| reference.index(j, k) as u32));
        for back in 1..=k.min(m) {
            for &(x, rank, c_s, c0) in &si.near {
                if c0 + (back - 1) * c_s + rank <= m {
                    out.push(reference.index(x, k - back) as u32);
                }
            }
        }
        out[start..].sort_unstable();
    });
    Ok(EligibleSets { m, sets })
}

/// Covariance value used for ranking candidates. The low mantissa bits are
/// dropped so that lags equal up to rounding give equal keys, and such ties go
/// to the smaller index. The map is monotone, so rankings are otherwise those
/// of the covariance itself.
#[inline]
pub fn ranking_key(cov: f64) -> f64 {
    if cov > 0.0 && cov.is_finite() {
        f64::from_bits(cov.to_bits() & !0xFFF)
    } else {
        cov
    }
}

/// Picks the `m` candidates with the largest covariance, ties to the smaller
/// index; the result is ordered from most to least correlated.
fn top_by_cov(mut scored: Vec<(f64, u32)>, m: usize, out: &mut Vec<u32>) {
    for p in scored.iter_mut() {
        p.0 = ranking_key(p.0);
    }
    let cmp = |a: &(f64, u32), b: &(f64, u32)| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1));
    if scored.len() > m && m > 0 {
        scored.select_nth_unstable_by(m - 1, cmp);
    }
    scored.truncate(m);
    scored.sort_by(cmp);
    out.extend(scored.iter().map(|p| p.1));
}

/// Adaptive sets: the `min(m, |E(i)|)` eligible points most correlated with
/// each target under `params`.
pub fn adaptive_neighbors(
    eligible: &Arc<EligibleSets>,
    reference: &ReferenceSet,
    params: &CovarianceParams,
    m: usize,
) -> Result<NeighborTable> {
    let rc = ReferenceCovariance::new(reference, params)?;
    Ok(adaptive_with(eligible, &rc, m))
}

pub(crate) fn adaptive_with(eligible: &Arc<EligibleSets>, rc: &ReferenceCovariance<'_>, m: usize) -> NeighborTable {
    let sets = Ragged::build(eligible.len(), |i, out| {
        let scored: Vec<(f64, u32)> = eligible.get(i).iter().map(|&j| (rc.between(i, j as usize), j)).collect();
        top_by_cov(scored, m, out);
    });
    NeighborTable { m, scheme: Scheme::Adaptive, sets, eligible: Some(Arc::clone(eligible)) }
}

/// Builds the adaptive table from scratch.
pub fn adaptive_table(reference: &ReferenceSet, params: &CovarianceParams, m: usize) -> Result<NeighborTable> {
    let e = Arc::new(build_eligible_sets(reference, m)?);
    adaptive_neighbors(&e, reference, params, m)
}

/// Neighbor candidates of a point outside the reference set.
#[derive(Debug, Clone)]
pub enum PredictionCandidates {
    /// Fixed neighbor set (simple scheme).
    Fixed(Vec<usize>),
    /// Eligible reference points; the final set depends on the parameters.
    Eligible { candidates: Vec<usize>, m: usize },
}

impl PredictionCandidates {
    /// Builds the candidates of `p` for the given scheme and budget.
    ///
    /// The adaptive candidates are the reference points whose dominance
    /// rectangle, taken over the whole reference set, holds at most `m`
    /// points. The reference set is a product of sites and times, so the
    /// rectangle of `(x, k)` has `cS(h_x) cT(u_k)` points, less the exact-lag
    /// ties that come later in the enumeration.
    pub fn new(p: &SpaceTimePoint, reference: &ReferenceSet, scheme: Scheme, m: usize) -> Result<Self> {
        if let Some(i) = reference.locate(p) {
            return Err(Error::CoincidesWithReference(i));
        }
        let sites = reference.sites();
        let lags: Vec<(f64, usize)> =
            reference.times().iter().enumerate().map(|(k, &t)| ((t - p.t).abs(), k)).collect();
        match scheme {
            Scheme::Simple => {
                let q = perfect_sqrt(m)
                    .ok_or_else(|| Error::NeighborBudget(format!("m = {m} is not a perfect square")))?;
                let near_sites: Vec<usize> = rank_sites(sites, &p.s, 0..sites.len(), q)
                    .iter()
                    .filter(|e| e.rank <= q)
                    .map(|e| e.index)
                    .collect();
                let mut set = Vec::with_capacity(q * q);
                for t in rank_pairs(lags, q).iter().filter(|t| t.rank <= q) {
                    set.extend(near_sites.iter().map(|&x| reference.index(x, t.index)));
                }
                Ok(PredictionCandidates::Fixed(set))
            }
            Scheme::Adaptive => {
                if m == 0 {
                    return Err(Error::NeighborBudget("m must be at least 1".into()));
                }
                let ranked_sites = rank_sites(sites, &p.s, 0..sites.len(), m);
                let ranked_times = rank_pairs(lags, m);
                let mut candidates = Vec::new();
                for t in ranked_times.iter().filter(|t| t.rank <= m) {
                    for x in ranked_sites.iter().filter(|x| x.rank <= m) {
                        // ties in both lags that follow (x, t) in the enumeration:
                        // the whole site group at later tied times, plus later
                        // tied sites at the same time
                        let later_times = t.group_end - t.rank;
                        let later_sites = x.group_end - x.rank;
                        let later = later_times * (x.group_end - x.group_start) + later_sites;
                        if x.group_end * t.group_end - later <= m {
                            candidates.push(reference.index(x.index, t.index));
                        }
                    }
                }
                candidates.sort_unstable();
                Ok(PredictionCandidates::Eligible { candidates, m })
            }
        }
    }

    /// The neighbor set of `p` under `kernel`.
    pub fn select(&self, p: &SpaceTimePoint, reference: &ReferenceSet, kernel: &Kernel) -> Vec<usize> {
        match self {
            PredictionCandidates::Fixed(set) => set.clone(),
            PredictionCandidates::Eligible { candidates, m } => {
                let scored: Vec<(f64, u32)> =
                    candidates.iter().map(|&j| (kernel.cov_points(p, &reference.point(j)), j as u32)).collect();
                let mut out = Vec::with_capacity(*m);
                top_by_cov(scored, *m, &mut out);
                out.into_iter().map(|j| j as usize).collect()
            }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            PredictionCandidates::Fixed(s) => s.len(),
            PredictionCandidates::Eligible { candidates, .. } => candidates.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Neighbor set of a point outside the reference set: the Cartesian product of
/// nearest sites and times (simple) or the `m` most correlated eligible
/// reference points (adaptive, requires `params`).
pub fn prediction_neighbors(
    p: &SpaceTimePoint,
    reference: &ReferenceSet,
    scheme: Scheme,
    params: Option<&CovarianceParams>,
    m: usize,
) -> Result<Vec<usize>> {
    let cands = PredictionCandidates::new(p, reference, scheme, m)?;
    match (scheme, params) {
        (Scheme::Adaptive, None) => Err(Error::InvalidInput("adaptive prediction neighbors need parameters".into())),
        (_, Some(th)) => Ok(cands.select(p, reference, &Kernel::new(th)?)),
        (Scheme::Simple, None) => match cands {
            PredictionCandidates::Fixed(s) => Ok(s),
            PredictionCandidates::Eligible { .. } => unreachable!(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n_side: usize, dim: usize, n_times: usize) -> ReferenceSet {
        let step = |i: usize| if n_side > 1 { i as f64 / (n_side - 1) as f64 } else { 0.0 };
        let mut locs = Vec::new();
        match dim {
            1 => (0..n_side).for_each(|i| locs.push(vec![step(i)])),
            _ => {
                for i in 0..n_side {
                    for j in 0..n_side {
                        locs.push(vec![step(i), step(j)]);
                    }
                }
            }
        }
        let times: Vec<f64> = (0..n_times).map(|k| if n_times > 1 { k as f64 / (n_times - 1) as f64 } else { 0.0 }).collect();
        ReferenceSet::enumerate(&locs, &times).unwrap()
    }

    /// Dominance count of history point `p` for target `i`, by brute force.
    fn brute_count(r: &ReferenceSet, p: usize, i: usize) -> usize {
        let (hp, up) = (r.spatial_lag(p, i), r.temporal_lag(p, i));
        (0..i)
            .filter(|&q| {
                let (hq, uq) = (r.spatial_lag(q, i), r.temporal_lag(q, i));
                let le = |a: f64, b: f64| a <= b || tied(a, b);
                let both_tied = tied(hq, hp) && tied(uq, up);
                le(hq, hp) && le(uq, up) && !(both_tied && q > p)
            })
            .count()
    }

    fn brute_eligible(r: &ReferenceSet, i: usize, m: usize) -> Vec<usize> {
        (0..i).filter(|&p| brute_count(r, p, i) <= m).collect()
    }

    /// The m most correlated history points, by scanning the whole history.
    fn brute_top(r: &ReferenceSet, th: &CovarianceParams, i: usize, m: usize) -> Vec<usize> {
        let k = Kernel::new(th).unwrap();
        let mut scored: Vec<(f64, usize)> =
            (0..i).map(|j| (ranking_key(k.cov(r.spatial_lag(i, j), r.temporal_lag(i, j))), j)).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        scored.truncate(m);
        let mut out: Vec<usize> = scored.into_iter().map(|p| p.1).collect();
        out.sort_unstable();
        out
    }

    fn sorted(v: &[u32]) -> Vec<usize> {
        let mut v: Vec<usize> = v.iter().map(|&j| j as usize).collect();
        v.sort_unstable();
        v
    }

    fn random_monotone_theta(rng: &mut ChaCha8Rng, r: &ReferenceSet) -> CovarianceParams {
        let mut hs: Vec<f64> = (0..r.n_sites()).map(|j| r.spatial_lag(0, j)).chain([0.0]).collect();
        for j in 0..r.n_sites() {
            for k in 0..r.n_sites() {
                hs.push(site_distance(&r.sites()[j], &r.sites()[k]));
            }
        }
        hs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        hs.dedup();
        let us: Vec<f64> = r.times().iter().map(|t| t - r.times()[0]).collect();
        loop {
            let a = 10f64.powf(rng.random_range(-1.0..3.0));
            let c = 10f64.powf(rng.random_range(-1.0..0.8));
            let kappa = rng.random_range(0.0..1.0);
            let th = CovarianceParams::exponential(1.0, a, c, kappa).unwrap();
            if crate::covariance::check_natural_monotonicity(&th, &hs, &us) {
                return th;
            }
        }
    }

    fn line_reference(n_sites: usize, n_times: usize) -> ReferenceSet {
        let locs: Vec<Vec<f64>> = (1..=n_sites).map(|i| vec![i as f64]).collect();
        let times: Vec<f64> = (1..=n_times).map(|k| k as f64).collect();
        ReferenceSet::enumerate(&locs, &times).unwrap()
    }

    #[test]
    fn simple_line_example() {
        let r = line_reference(5, 5);
        let t = simple_neighbors(&r, 4).unwrap();
        let i = r.index(2, 2);
        // same time: s2, s1; previous time: s3 itself, then s2 (ties with s4
        // go to the smaller index)
        let want = vec![r.index(1, 2), r.index(0, 2), r.index(2, 1), r.index(1, 1)];
        assert_eq!(t.neighbors(i).iter().map(|&j| j as usize).collect::<Vec<_>>(), want);
        assert!(t.neighbors(0).is_empty());
    }

    #[test]
    fn simple_twelve_by_twelve_interior_sets_have_nine() {
        let r = line_reference(12, 12);
        let t = simple_neighbors(&r, 9).unwrap();
        for k in 2..12 {
            for s in 3..11 {
                let i = r.index(s, k);
                let set = t.neighbors(i);
                assert_eq!(set.len(), 9);
                let same = set.iter().filter(|&&j| r.time_of(j as usize) == k).count();
                let prev1 = set.iter().filter(|&&j| r.time_of(j as usize) == k - 1).count();
                let prev2 = set.iter().filter(|&&j| r.time_of(j as usize) == k - 2).count();
                assert_eq!((same, prev1, prev2), (3, 3, 3));
            }
        }
    }

    #[test]
    fn simple_errors_and_truncation() {
        let r = line_reference(5, 5);
        assert!(matches!(simple_neighbors(&r, 5), Err(Error::NeighborBudget(_))));
        assert!(simple_neighbors(&r, 25).is_err());
        let t = simple_neighbors(&r, 9).unwrap();
        // first time, second site: only one earlier site exists
        assert_eq!(t.neighbors(1).len(), 1);
        for i in 0..r.len() {
            assert!(t.neighbors(i).len() <= 9);
            assert!(t.neighbors(i).iter().all(|&j| (j as usize) < i));
        }
    }

    #[test]
    fn simple_sets_do_not_depend_on_theta() {
        let r = grid(4, 2, 4);
        let t1 = simple_neighbors(&r, 9).unwrap();
        let th = CovarianceParams::exponential(1.0, 500.0, 2.5, 0.5).unwrap();
        let t2 = simple_neighbors(&r, 9).unwrap().refreshed(&r, &th).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn eligible_sets_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let irregular: Vec<Vec<f64>> =
            (0..9).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        let refs = [
            grid(4, 2, 4),
            line_reference(7, 5),
            ReferenceSet::enumerate(&irregular, &[0.0, 0.3, 0.35, 1.0]).unwrap(),
        ];
        for r in &refs {
            for m in [1, 4, 5, 9] {
                let e = build_eligible_sets(r, m).unwrap();
                for i in 0..r.len() {
                    assert_eq!(sorted(e.get(i)), brute_eligible(r, i, m), "i={i} m={m}");
                }
            }
        }
    }

    #[test]
    fn first_point_has_empty_eligible_set() {
        let e = build_eligible_sets(&grid(3, 2, 3), 4).unwrap();
        assert!(e.get(0).is_empty());
        assert!(build_eligible_sets(&grid(3, 2, 3), 0).is_err());
    }

    #[test]
    fn dominance_rectangle_threshold() {
        // one-dimensional 12 x 12 layout, m = 9
        let r = line_reference(12, 12);
        let i = r.index(5, 11);
        let e = build_eligible_sets(&r, 9).unwrap();
        let members = sorted(e.get(i));
        let counts: Vec<(usize, usize)> = (0..i).map(|p| (p, brute_count(&r, p, i))).collect();
        let with12 = counts.iter().find(|c| c.1 == 12).expect("a rectangle with 12 points");
        let with8 = counts.iter().find(|c| c.1 == 8).expect("a rectangle with 8 points");
        assert!(!members.contains(&with12.0));
        assert!(members.contains(&with8.0));
    }

    #[test]
    fn superset_property_on_small_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for r in [grid(4, 2, 4), line_reference(8, 6)] {
            for m in [4, 9] {
                let e = Arc::new(build_eligible_sets(&r, m).unwrap());
                for _ in 0..10 {
                    let th = random_monotone_theta(&mut rng, &r);
                    let t = adaptive_neighbors(&e, &r, &th, m).unwrap();
                    for i in 0..r.len() {
                        let truth = brute_top(&r, &th, i, m);
                        let set = sorted(e.get(i));
                        assert!(truth.iter().all(|j| set.contains(j)), "i={i} th={th:?}");
                        assert_eq!(sorted(t.neighbors(i)), truth, "i={i}");
                    }
                }
            }
        }
    }

    #[test]
    fn adaptive_nesting_invariants() {
        let r = grid(4, 2, 5);
        let th = CovarianceParams::exponential(1.0, 50.0, 2.0, 0.75).unwrap();
        let t = adaptive_table(&r, &th, 9).unwrap();
        let e = t.eligible().unwrap();
        for i in 0..r.len() {
            let n = t.neighbors(i);
            assert!(n.len() <= 9);
            assert!(n.iter().all(|j| e.get(i).contains(j)));
            assert!(e.get(i).iter().all(|&j| (j as usize) < i));
            if e.get(i).len() <= 9 {
                assert_eq!(sorted(n), sorted(e.get(i)));
            }
        }
        assert!(t.neighbors(0).is_empty());
    }

    #[test]
    fn adaptive_sets_follow_theta() {
        // weak temporal decay favors the same site at earlier times, strong
        // temporal decay favors other sites at the same time
        let r = line_reference(12, 12);
        let e = Arc::new(build_eligible_sets(&r, 9).unwrap());
        let th1 = CovarianceParams::exponential(1.0, 0.01, 3.0, 1.0).unwrap();
        let th2 = CovarianceParams::exponential(1.0, 100.0, 0.2, 1.0).unwrap();
        let i = r.index(6, 8);
        let n1 = sorted(adaptive_neighbors(&e, &r, &th1, 9).unwrap().neighbors(i));
        let n2 = sorted(adaptive_neighbors(&e, &r, &th2, 9).unwrap().neighbors(i));
        assert_ne!(n1, n2);
    }

    #[test]
    fn prediction_simple_is_cartesian_product() {
        let r = grid(4, 2, 4);
        let p = SpaceTimePoint::new(&[0.5, 0.5], 0.5).unwrap();
        let set = prediction_neighbors(&p, &r, Scheme::Simple, None, 4).unwrap();
        assert_eq!(set.len(), 4);
        let mut sites: Vec<usize> = set.iter().map(|&j| r.site_of(j)).collect();
        let mut times: Vec<usize> = set.iter().map(|&j| r.time_of(j)).collect();
        sites.sort_unstable();
        sites.dedup();
        times.sort_unstable();
        times.dedup();
        assert_eq!((sites.len(), times.len()), (2, 2));
    }

    #[test]
    fn prediction_rejects_reference_point() {
        let r = grid(3, 2, 3);
        let p = r.point(5);
        assert!(matches!(
            prediction_neighbors(&p, &r, Scheme::Simple, None, 4),
            Err(Error::CoincidesWithReference(5))
        ));
    }

    #[test]
    fn prediction_adaptive_saturated_takes_everything() {
        let r = grid(3, 2, 3);
        let th = CovarianceParams::exponential(1.0, 5.0, 2.0, 0.5).unwrap();
        let p = SpaceTimePoint::new(&[0.2, 0.7], 0.4).unwrap();
        let mut set = prediction_neighbors(&p, &r, Scheme::Adaptive, Some(&th), r.len() + 3).unwrap();
        set.sort_unstable();
        assert_eq!(set, (0..r.len()).collect::<Vec<_>>());
    }

    #[test]
    fn prediction_adaptive_matches_brute_force() {
        let r = grid(5, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let th = random_monotone_theta(&mut rng, &r);
            let k = Kernel::new(&th).unwrap();
            let p = SpaceTimePoint::new(&[rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)], rng.random_range(0.0..1.0))
                .unwrap();
            for m in [4, 9, 16] {
                let mut got = prediction_neighbors(&p, &r, Scheme::Adaptive, Some(&th), m).unwrap();
                got.sort_unstable();
                let mut scored: Vec<(f64, usize)> = (0..r.len()).map(|j| (ranking_key(k.cov_points(&p, &r.point(j))), j)).collect();
                scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                let mut want: Vec<usize> = scored[..m].iter().map(|s| s.1).collect();
                want.sort_unstable();
                assert_eq!(got, want);
            }
        }
    }

    #[test]
    fn csv_dump() {
        let r = line_reference(3, 2);
        let t = simple_neighbors(&r, 4).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("i,rank,j"));
        assert_eq!(lines.count(), t.total_neighbors());
    }

    #[test]
    fn from_sets_validates_history() {
        assert!(NeighborTable::from_sets(&[vec![], vec![1]]).is_err());
        let t = NeighborTable::full_history(4);
        assert_eq!(t.neighbors(3), &[0, 1, 2]);
        assert_eq!(t.m(), 3);
    }
}
