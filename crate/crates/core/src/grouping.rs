//! Geographic grouping of VUE-pairs by spectral clustering.
//!
//! Channels may be reused across groups but not inside one. The recipe is the
//! usual normalised one: Gaussian similarity on Euclidean distance (bandwidth
//! defaults to the median pairwise distance), symmetric normalised Laplacian,
//! the eigenvectors of its `I` smallest eigenvalues, row normalisation, and
//! k-means++ on the rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Point;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    assignment: Vec<usize>,
    groups: usize,
    epoch_created: u64,
}

impl Grouping {
    /// Builds a grouping from explicit labels in `0..groups`.
    pub fn from_labels(assignment: Vec<usize>, groups: usize, epoch_created: u64) -> Result<Self> {
        if let Some(bad) = assignment.iter().find(|&&g| g >= groups) {
            return Err(Error::InvalidState(format!("group label {bad} outside 0..{groups}")));
        }
        Ok(Self { assignment, groups, epoch_created })
    }

    /// Every pair in one group.
    pub fn single(pairs: usize, epoch_created: u64) -> Self {
        Self { assignment: vec![0; pairs], groups: 1, epoch_created }
    }

    pub fn group_of(&self, pair: usize) -> usize {
        self.assignment[pair]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Upper bound on the number of groups (some may be empty).
    pub fn group_count(&self) -> usize {
        self.groups
    }

    pub fn epoch_created(&self) -> u64 {
        self.epoch_created
    }

    pub fn pairs(&self) -> usize {
        self.assignment.len()
    }

    /// Pair indices of group `g`, ascending.
    pub fn members(&self, g: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&k| self.assignment[k] == g).collect()
    }

    /// Members of every group, including empty ones.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.groups];
        for (k, &g) in self.assignment.iter().enumerate() {
            out[g].push(k);
        }
        out
    }

    pub fn group_size(&self, g: usize) -> usize {
        self.assignment.iter().filter(|&&x| x == g).count()
    }
}

/// Which end of a pair is used as its location for clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterAnchor {
    #[default]
    Receiver,
    Transmitter,
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringConfig {
    #[serde(default)]
    pub anchor: ClusterAnchor,
    /// Kernel bandwidth in metres; the median pairwise distance when absent.
    #[serde(default)]
    pub bandwidth_m: Option<f64>,
    #[serde(default = "default_kmeans_iterations")]
    pub kmeans_iterations: usize,
}

fn default_kmeans_iterations() -> usize {
    100
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self { anchor: ClusterAnchor::Receiver, bandwidth_m: None, kmeans_iterations: default_kmeans_iterations() }
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues ascending and the matching eigenvectors as columns of a
/// row-major `n x n` matrix.
pub fn symmetric_eigen(matrix: &[Vec<f64>], tol: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = matrix.len();
    let mut a: Vec<Vec<f64>> = matrix.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p][q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vkp = row[p];
                    let vkq = row[q];
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i][i].total_cmp(&a[j][j]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = (0..n).map(|r| order.iter().map(|&c| v[r][c]).collect()).collect();
    (values, vectors)
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations. Empty clusters are refilled
/// with the point of the largest cluster farthest from its centre.
pub fn kmeans<R: Rng + ?Sized>(rows: &[Vec<f64>], k: usize, iterations: usize, rng: &mut R) -> Vec<usize> {
    let n = rows.len();
    let dim = rows.first().map_or(0, Vec::len);
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    centres.push(rows[first].clone());
    chosen[first] = true;
    while centres.len() < k {
        let d2: Vec<f64> = rows
            .iter()
            .map(|r| centres.iter().map(|c| sq_dist(r, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            if chosen[idx] {
                (0..n).find(|&i| !chosen[i]).unwrap_or(idx)
            } else {
                idx
            }
        } else {
            // Every remaining point coincides with a centre.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centres.push(rows[pick].clone());
    }

    let mut labels = vec![0usize; n];
    for it in 0..iterations.max(1) {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let mut best = (f64::INFINITY, 0);
            for (c, centre) in centres.iter().enumerate() {
                let d = sq_dist(r, centre);
                if d < best.0 {
                    best = (d, c);
                }
            }
            if labels[i] != best.1 {
                changed = true;
                labels[i] = best.1;
            }
        }
        repair_empty(rows, &mut labels, &centres, k);
        for (c, centre) in centres.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = rows.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..dim {
                centre[d] = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
        if !changed && it > 0 {
            break;
        }
    }
    repair_empty(rows, &mut labels, &centres, k);
    labels
}

fn repair_empty(rows: &[Vec<f64>], labels: &mut [usize], centres: &[Vec<f64>], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &l in labels.iter() {
            sizes[l] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else { return };
        let largest = (0..k).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap_or(0);
        if sizes[largest] <= 1 {
            return;
        }
        let far = (0..rows.len())
            .filter(|&i| labels[i] == largest)
            .max_by(|&a, &b| sq_dist(&rows[a], &centres[largest]).total_cmp(&sq_dist(&rows[b], &centres[largest])).then(b.cmp(&a)))
            .expect("largest cluster is non-empty");
        labels[far] = empty;
    }
}

/// Relabels groups in order of first appearance so equal partitions compare equal.
fn canonical(labels: &[usize], groups: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; groups.max(labels.iter().copied().max().map_or(0, |m| m + 1))];
    let mut next = 0;
    labels
        .iter()
        .map(|&l| {
            if map[l] == usize::MAX {
                map[l] = next;
                next += 1;
            }
            map[l]
        })
        .collect()
}

/// Partitions `positions` into `groups` clusters.
pub fn spectral_cluster<R: Rng + ?Sized>(
    positions: &[Point],
    groups: usize,
    config: &ClusteringConfig,
    epoch: u64,
    rng: &mut R,
) -> Result<Grouping> {
    let n = positions.len();
    if groups == 0 || groups > n {
        return Err(Error::InvalidState(format!("cannot form {groups} groups from {n} pairs")));
    }
    if groups == 1 {
        return Ok(Grouping::single(n, epoch));
    }
    if groups == n {
        return Grouping::from_labels((0..n).collect(), groups, epoch);
    }

    let dist: Vec<Vec<f64>> = positions.iter().map(|a| positions.iter().map(|b| a.distance(*b)).collect()).collect();
    let sigma = config
        .bandwidth_m
        .unwrap_or_else(|| median((0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| dist[i][j]).collect()));
    let sigma = if sigma > 0.0 && sigma.is_finite() { sigma } else { 1.0 };

    let mut w = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                w[i][j] = (-dist[i][j] * dist[i][j] / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let inv_sqrt_deg: Vec<f64> = w
        .iter()
        .map(|row| {
            let d: f64 = row.iter().sum();
            if d > 1e-300 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let lap: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let id = if i == j { 1.0 } else { 0.0 };
                    id - inv_sqrt_deg[i] * w[i][j] * inv_sqrt_deg[j]
                })
                .collect()
        })
        .collect();
    let (_, vectors) = symmetric_eigen(&lap, 1e-10);
    let rows: Vec<Vec<f64>> = vectors
        .iter()
        .map(|row| {
            let r: Vec<f64> = row[..groups].to_vec();
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-300 {
                r.into_iter().map(|x| x / norm).collect()
            } else {
                r
            }
        })
        .collect();
    let labels = kmeans(&rows, groups, config.kmeans_iterations, rng);
    Grouping::from_labels(canonical(&labels, groups), groups, epoch)
}

/// Re-clusters on schedule: a fresh grouping when `epoch` is a multiple of
/// `interval`, otherwise the input unchanged.
pub fn maybe_regroup<R: Rng + ?Sized>(
    grouping: &Grouping,
    epoch: u64,
    interval: u64,
    positions: &[Point],
    groups: usize,
    config: &ClusteringConfig,
    rng: &mut R,
) -> Result<Grouping> {
    if interval == 0 {
        return Err(Error::InvalidState("clustering interval must be at least 1".into()));
    }
    if epoch % interval == 0 {
        spectral_cluster(positions, groups, config, epoch, rng)
    } else {
        Ok(grouping.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, Stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn cfg() -> ClusteringConfig {
        ClusteringConfig::default()
    }

    /// Connected components of the graph linking points closer than `threshold`.
    fn components(points: &[Point], threshold: f64) -> Vec<usize> {
        let n = points.len();
        let mut label = vec![usize::MAX; n];
        let mut next = 0;
        for s in 0..n {
            if label[s] != usize::MAX {
                continue;
            }
            let mut stack = vec![s];
            label[s] = next;
            while let Some(u) = stack.pop() {
                for v in 0..n {
                    if label[v] == usize::MAX && points[u].distance(points[v]) < threshold {
                        label[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        label
    }

    #[test]
    fn jacobi_matches_known_spectrum() {
        let m = vec![vec![2.0, 1.0, 0.0], vec![1.0, 2.0, 1.0], vec![0.0, 1.0, 2.0]];
        let (vals, vecs) = symmetric_eigen(&m, 1e-12);
        let s2 = 2f64.sqrt();
        for (got, want) in vals.iter().zip([2.0 - s2, 2.0, 2.0 + s2]) {
            assert!((got - want).abs() < 1e-10);
        }
        // A v = lambda v for every column.
        for c in 0..3 {
            for r in 0..3 {
                let av: f64 = (0..3).map(|k| m[r][k] * vecs[k][c]).sum();
                assert!((av - vals[c] * vecs[r][c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn one_group_and_singletons() {
        let pts: Vec<Point> = (0..6).map(|i| Point::new(i as f64, 2.0 * i as f64)).collect();
        let mut rng = derive(0, Stream::Grouping, 0);
        let one = spectral_cluster(&pts, 1, &cfg(), 0, &mut rng).unwrap();
        assert!(one.assignment().iter().all(|&g| g == 0));
        let all = spectral_cluster(&pts, 6, &cfg(), 0, &mut rng).unwrap();
        let mut seen = all.assignment().to_vec();
        seen.sort();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn two_clumps_match_components() {
        let mut rng = derive(4, Stream::Grouping, 0);
        for trial in 0..20 {
            let mut pts = Vec::new();
            for i in 0..5 {
                pts.push(Point::new(10.0 + rng.random::<f64>() * 5.0, 10.0 + i as f64));
            }
            for i in 0..4 {
                pts.push(Point::new(200.0 + rng.random::<f64>() * 5.0, 220.0 - i as f64));
            }
            // Interleave so labels are not trivially ordered.
            pts.swap(1, 6);
            let oracle = canonical(&components(&pts, 50.0), 2);
            let g = spectral_cluster(&pts, 2, &cfg(), 0, &mut rng).unwrap();
            assert_eq!(g.assignment(), &oracle[..], "trial {trial}");
        }
    }

    #[test]
    fn duplicate_positions_are_handled() {
        let pts = vec![Point::new(5.0, 5.0); 6];
        let mut rng = derive(1, Stream::Grouping, 0);
        let g = spectral_cluster(&pts, 3, &cfg(), 0, &mut rng).unwrap();
        assert_eq!(g.assignment().len(), 6);
        assert!(g.partition().iter().all(|m| !m.is_empty()));
    }

    #[test]
    fn regroup_schedule() {
        let pts: Vec<Point> = (0..8).map(|i| Point::new((i * 30) as f64, (i % 3) as f64 * 40.0)).collect();
        let mut rng = derive(2, Stream::Grouping, 0);
        let base = Grouping::single(8, 0);
        let same = maybe_regroup(&base, 7, 10, &pts, 2, &cfg(), &mut rng).unwrap();
        assert_eq!(same, base);
        let fresh = maybe_regroup(&base, 10, 10, &pts, 2, &cfg(), &mut rng).unwrap();
        assert_eq!(fresh.epoch_created(), 10);
        assert_ne!(fresh, base);
        for epoch in 1..5 {
            let g = maybe_regroup(&base, epoch, 1, &pts, 2, &cfg(), &mut rng).unwrap();
            assert_eq!(g.epoch_created(), epoch);
        }
        assert!(maybe_regroup(&base, 3, 0, &pts, 2, &cfg(), &mut rng).is_err());
    }

    #[test]
    fn same_seed_is_idempotent() {
        let pts: Vec<Point> = (0..12).map(|i| Point::new((i * 17 % 250) as f64, (i * 41 % 250) as f64)).collect();
        let a = spectral_cluster(&pts, 3, &cfg(), 0, &mut derive(9, Stream::Grouping, 10)).unwrap();
        let b = spectral_cluster(&pts, 3, &cfg(), 0, &mut derive(9, Stream::Grouping, 10)).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn always_a_partition(
            coords in prop::collection::vec((0.0f64..250.0, 0.0f64..250.0), 2..16),
            groups in 1usize..6,
            seed in any::<u64>(),
        ) {
            let pts: Vec<Point> = coords.iter().map(|&(x, y)| Point::new(x, y)).collect();
            let groups = groups.min(pts.len());
            let g = spectral_cluster(&pts, groups, &cfg(), 0, &mut derive(seed, Stream::Grouping, 0)).unwrap();
            prop_assert_eq!(g.assignment().len(), pts.len());
            prop_assert!(g.assignment().iter().all(|&l| l < groups));
            let parts = g.partition();
            prop_assert!(parts.iter().all(|p| !p.is_empty()));
            prop_assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), pts.len());
        }
    }
}
