//! Space-time coordinates and the reference-set enumeration.
//!
//! Reference points are enumerated time-major: every site at the first time,
//! then every site at the second time, and so on; within one time the sites
//! keep the order in which they were supplied. The history set of a point is
//! exactly the set of points with a smaller index. All indices in this crate
//! are zero-based.

use crate::error::{Error, Result};

/// Maximum spatial dimension.
pub const MAX_DIM: usize = 3;

/// A spatial site. Unused trailing components are zero.
pub type Site = [f64; MAX_DIM];

/// A (location, time) coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceTimePoint {
    pub s: Site,
    pub t: f64,
}

impl SpaceTimePoint {
    /// Builds a point from a 1-, 2- or 3-component location.
    pub fn new(s: &[f64], t: f64) -> Result<Self> {
        Ok(SpaceTimePoint { s: site_from_slice(s)?, t: finite_time(t)? })
    }

    /// Spatial lag `h = ||s1 - s2||`.
    #[inline]
    pub fn spatial_lag(&self, other: &SpaceTimePoint) -> f64 {
        site_distance(&self.s, &other.s)
    }

    /// Temporal lag `u = |t1 - t2|`.
    #[inline]
    pub fn temporal_lag(&self, other: &SpaceTimePoint) -> f64 {
        (self.t - other.t).abs()
    }
}

pub(crate) fn site_from_slice(s: &[f64]) -> Result<Site> {
    if s.is_empty() || s.len() > MAX_DIM {
        return Err(Error::Coordinates(format!(
            "spatial dimension must be 1..={MAX_DIM}, got {}",
            s.len()
        )));
    }
    if let Some(v) = s.iter().find(|v| !v.is_finite()) {
        return Err(Error::Coordinates(format!("non-finite spatial component {v}")));
    }
    let mut site = [0.0; MAX_DIM];
    site[..s.len()].copy_from_slice(s);
    Ok(site)
}

fn finite_time(t: f64) -> Result<f64> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::Coordinates(format!("non-finite time {t}")))
    }
}

/// Euclidean distance between two sites.
#[inline]
pub fn site_distance(a: &Site, b: &Site) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    (d0 * d0 + d1 * d1 + d2 * d2).sqrt()
}

/// The product grid of `N` sites by `M` times, enumerated time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSet {
    dim: usize,
    sites: Vec<Site>,
    times: Vec<f64>,
}

impl ReferenceSet {
    /// Enumerates the reference set for the given sites and times.
    ///
    /// Sites must be pairwise distinct and times strictly increasing. The
    /// point at site `j` and time `k` gets index `k * N + j`.
    pub fn enumerate(locations: &[Vec<f64>], times: &[f64]) -> Result<Self> {
        if locations.is_empty() || times.is_empty() {
            return Err(Error::InvalidInput("reference set needs at least one site and one time".into()));
        }
        let dim = locations[0].len();
        let mut sites = Vec::with_capacity(locations.len());
        for (j, loc) in locations.iter().enumerate() {
            if loc.len() != dim {
                return Err(Error::Coordinates(format!(
                    "site {j} has {} components, expected {dim}",
                    loc.len()
                )));
            }
            sites.push(site_from_slice(loc)?);
        }
        Self::from_sites(dim, sites, times.to_vec())
    }

    pub(crate) fn from_sites(dim: usize, sites: Vec<Site>, times: Vec<f64>) -> Result<Self> {
        for t in &times {
            finite_time(*t)?;
        }
        for w in times.windows(2) {
            if w[1] <= w[0] {
                let kind = if w[1] == w[0] { "time" } else { "time order" };
                return Err(Error::Duplicate {
                    kind,
                    detail: format!("times must be strictly increasing ({} then {})", w[0], w[1]),
                });
            }
        }
        let mut order: Vec<usize> = (0..sites.len()).collect();
        order.sort_by(|&a, &b| sites[a].partial_cmp(&sites[b]).unwrap());
        for w in order.windows(2) {
            if sites[w[0]] == sites[w[1]] {
                return Err(Error::Duplicate {
                    kind: "site",
                    detail: format!("sites {} and {} share coordinates {:?}", w[0], w[1], &sites[w[0]][..dim]),
                });
            }
        }
        Ok(ReferenceSet { dim, sites, times })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of sites `N`.
    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    /// Number of times `M`.
    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    /// Number of reference points `r = N * M`.
    pub fn len(&self) -> usize {
        self.sites.len() * self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Index of the point at site `j` and time `k`.
    #[inline]
    pub fn index(&self, site: usize, time: usize) -> usize {
        time * self.sites.len() + site
    }

    /// Checked version of [`ReferenceSet::index`].
    pub fn try_index(&self, site: usize, time: usize) -> Result<usize> {
        if site >= self.n_sites() {
            return Err(Error::IndexOutOfRange { index: site, len: self.n_sites() });
        }
        if time >= self.n_times() {
            return Err(Error::IndexOutOfRange { index: time, len: self.n_times() });
        }
        Ok(self.index(site, time))
    }

    #[inline]
    pub fn site_of(&self, i: usize) -> usize {
        i % self.sites.len()
    }

    #[inline]
    pub fn time_of(&self, i: usize) -> usize {
        i / self.sites.len()
    }

    #[inline]
    pub fn site(&self, i: usize) -> &Site {
        &self.sites[self.site_of(i)]
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        self.times[self.time_of(i)]
    }

    pub fn point(&self, i: usize) -> SpaceTimePoint {
        SpaceTimePoint { s: *self.site(i), t: self.time(i) }
    }

    pub fn points(&self) -> Vec<SpaceTimePoint> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Spatial lag between reference points `i` and `j`.
    #[inline]
    pub fn spatial_lag(&self, i: usize, j: usize) -> f64 {
        site_distance(self.site(i), self.site(j))
    }

    /// Temporal lag between reference points `i` and `j`.
    #[inline]
    pub fn temporal_lag(&self, i: usize, j: usize) -> f64 {
        (self.time(i) - self.time(j)).abs()
    }

    /// Whether point `i` belongs to the history set of point `j`.
    pub fn in_history(&self, i: usize, j: usize) -> Result<bool> {
        let r = self.len();
        for idx in [i, j] {
            if idx >= r {
                return Err(Error::IndexOutOfRange { index: idx, len: r });
            }
        }
        let (ti, tj) = (self.time_of(i), self.time_of(j));
        Ok(ti < tj || (ti == tj && self.site_of(i) < self.site_of(j)))
    }

    /// The reference index of `p`, if `p` is one of the reference points.
    pub fn locate(&self, p: &SpaceTimePoint) -> Option<usize> {
        let k = self.times.iter().position(|&t| t == p.t)?;
        let j = self.sites.iter().position(|s| *s == p.s)?;
        Some(self.index(j, k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> Vec<Vec<f64>> {
        (1..=n).map(|i| vec![i as f64]).collect()
    }

    #[test]
    fn two_by_two_enumeration_is_time_major() {
        let r = ReferenceSet::enumerate(&line(2), &[1.0, 2.0]).unwrap();
        assert_eq!(r.len(), 4);
        assert_eq!(r.index(0, 0), 0);
        assert_eq!(r.index(1, 0), 1);
        assert_eq!(r.index(0, 1), 2);
        assert_eq!(r.index(1, 1), 3);
    }

    #[test]
    fn single_point_has_empty_history() {
        let r = ReferenceSet::enumerate(&line(1), &[0.0]).unwrap();
        assert_eq!(r.len(), 1);
        assert!(!r.in_history(0, 0).unwrap());
    }

    #[test]
    fn index_of_second_site_second_time() {
        let r = ReferenceSet::enumerate(&line(3), &[0.0, 1.0]).unwrap();
        // (k-1)N + j = 3 + 2 = 5 in one-based terms
        assert_eq!(r.try_index(1, 1).unwrap() + 1, 5);
    }

    #[test]
    fn history_examples() {
        let r = ReferenceSet::enumerate(&line(3), &[0.0, 1.0]).unwrap();
        assert!(r.in_history(0, 1).unwrap());
        assert!(!r.in_history(2, 2).unwrap());
        // (s3,t1) precedes (s1,t2)
        assert!(r.in_history(r.index(2, 0), r.index(0, 1)).unwrap());
        assert!(r.in_history(9, 0).is_err());
    }

    #[test]
    fn history_is_prefix_of_enumeration() {
        let r = ReferenceSet::enumerate(&line(4), &[0.0, 0.5, 2.0]).unwrap();
        for j in 0..r.len() {
            let hist: Vec<usize> = (0..r.len()).filter(|&i| r.in_history(i, j).unwrap()).collect();
            assert_eq!(hist, (0..j).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rejects_duplicates() {
        assert!(matches!(
            ReferenceSet::enumerate(&[vec![0.0, 1.0], vec![0.0, 1.0]], &[0.0]),
            Err(Error::Duplicate { kind: "site", .. })
        ));
        assert!(ReferenceSet::enumerate(&line(2), &[1.0, 1.0]).is_err());
        assert!(ReferenceSet::enumerate(&line(2), &[2.0, 1.0]).is_err());
        assert!(ReferenceSet::enumerate(&[vec![f64::NAN]], &[1.0]).is_err());
    }

    #[test]
    fn locate_round_trips() {
        let r = ReferenceSet::enumerate(&[vec![0.0, 0.0], vec![1.0, 0.5]], &[0.0, 1.0, 3.0]).unwrap();
        for i in 0..r.len() {
            assert_eq!(r.locate(&r.point(i)), Some(i));
        }
        assert_eq!(r.locate(&SpaceTimePoint::new(&[0.0, 0.0], 2.0).unwrap()), None);
    }
}
