//! K-means over combined MSU vectors, minimizing the within-cluster sum of
//! squared Euclidean distances, plus an exhaustive solver for tiny
//! instances used as a test oracle.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::squared_distance;

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansConfig<T> {
    pub k: usize,
    pub max_iters: usize,
    /// Stop when the relative inertia decrease falls below this.
    pub tol: T,
    pub n_init: usize,
    pub seed: u64,
}

impl<T: Scalar> KmeansConfig<T> {
    pub fn new(k: usize) -> Self {
        Self { k, max_iters: 200, tol: T::lit(1e-6), n_init: 10, seed: 0 }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_n_init(mut self, n_init: usize) -> Self {
        self.n_init = n_init;
        self
    }

    fn validate(&self, n_points: usize) -> Result<()> {
        if self.k == 0 || self.k > n_points {
            return Err(Error::Config(format!("k={} with {n_points} points", self.k)));
        }
        if self.max_iters == 0 || self.n_init == 0 {
            return Err(Error::Config("max_iters and n_init must be at least 1".into()));
        }
        if !(self.tol > T::zero()) {
            return Err(Error::Config(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult<T> {
    /// Point index → cluster id in `0..k`.
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<T>>,
    pub inertia: T,
    pub iterations_run: usize,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub inertia_trace: Vec<T>,
}

impl<T: Scalar> ClusterResult<T> {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Member indices of each cluster, in point order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (i, &c) in self.assignments.iter().enumerate() {
            out[c].push(i);
        }
        out
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members().iter().map(Vec::len).collect()
    }
}

fn check_points<T: Scalar>(points: &[Vec<T>]) -> Result<usize> {
    let dim = points
        .first()
        .ok_or_else(|| Error::Domain("k-means on an empty point set".into()))?
        .len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::dim("kmeans", "points have differing dimensions"));
    }
    Ok(dim)
}

/// k-means++ seeding. Previously chosen points have zero weight; when every
/// remaining point coincides with a chosen centroid the next pick is uniform
/// over the points not yet chosen, so `k == n` always returns each point once.
pub fn kmeans_pp_init<T: Scalar>(points: &[Vec<T>], k: usize, rng: &mut Rng) -> Result<Vec<Vec<T>>> {
    check_points(points)?;
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Domain(format!("k={k} with {n} points")));
    }
    let mut chosen = vec![false; n];
    let mut centroids = Vec::with_capacity(k);
    let first = rng.below(n);
    chosen[first] = true;
    centroids.push(points[first].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &points[first]).as_f64()).collect();

    while centroids.len() < k {
        let total: f64 = d2.iter().zip(&chosen).filter(|(_, &c)| !c).map(|(d, _)| d).sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for i in 0..n {
                if chosen[i] || d2[i] <= 0.0 {
                    continue;
                }
                acc += d2[i];
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total weight has a candidate")
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.below(free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            let d = squared_distance(p, &points[pick]).as_f64();
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    Ok(centroids)
}

fn nearest<T: Scalar>(p: &[T], centroids: &[Vec<T>]) -> (usize, T) {
    let mut best = (0, squared_distance(p, &centroids[0]));
    for (c, mu) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(p, mu);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn means<T: Scalar>(points: &[Vec<T>], assignments: &[usize], k: usize, dim: usize) -> Vec<Vec<T>> {
    let mut sums = vec![vec![T::zero(); dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.iter().zip(assignments) {
        counts[c] += 1;
        for (s, &v) in sums[c].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (sum, &count) in sums.iter_mut().zip(&counts) {
        let n = T::from_count(count.max(1));
        sum.iter_mut().for_each(|v| *v /= n);
    }
    sums
}

fn inertia_of<T: Scalar>(points: &[Vec<T>], assignments: &[usize], centroids: &[Vec<T>]) -> T {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &c)| squared_distance(p, &centroids[c]))
        .sum()
}

/// Fills empty clusters: each takes the point farthest from its current
/// centroid among clusters that would keep at least one member.
fn repair_empty<T: Scalar>(points: &[Vec<T>], assignments: &mut [usize], centroids: &[Vec<T>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignments.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else { return };
        let donor = (0..points.len())
            .filter(|&i| counts[assignments[i]] >= 2)
            .max_by(|&i, &j| {
                let di = squared_distance(&points[i], &centroids[assignments[i]]);
                let dj = squared_distance(&points[j], &centroids[assignments[j]]);
                di.partial_cmp(&dj).unwrap().then(j.cmp(&i))
            })
            .expect("k <= n guarantees a cluster with two members");
        assignments[donor] = empty;
    }
}

fn lloyd<T: Scalar>(points: &[Vec<T>], cfg: &KmeansConfig<T>, rng: &mut Rng, dim: usize) -> Result<ClusterResult<T>> {
    let k = cfg.k;
    let mut centroids = kmeans_pp_init(points, k, rng)?;
    let mut assignments = vec![usize::MAX; points.len()];
    let mut trace: Vec<T> = Vec::new();
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (c, _) = nearest(p, &centroids);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        repair_empty(points, &mut assignments, &centroids, k);
        centroids = means(points, &assignments, k, dim);
        let inertia = inertia_of(points, &assignments, &centroids);
        if let Some(&prev) = trace.last() {
            let slack = T::lit(1e-12) * prev.max(T::one());
            if inertia > prev + slack {
                return Err(Error::Invariant(format!(
                    "k-means inertia increased from {prev} to {inertia}"
                )));
            }
        }
        let prev = trace.last().copied();
        trace.push(inertia);
        if !changed || inertia == T::zero() {
            break;
        }
        if let Some(prev) = prev {
            if prev > T::zero() && (prev - inertia) / prev < cfg.tol {
                break;
            }
        }
    }
    Ok(ClusterResult {
        assignments,
        inertia: *trace.last().unwrap(),
        centroids,
        iterations_run: iterations,
        inertia_trace: trace,
    })
}

/// Lloyd's algorithm with k-means++ seeding; best of `n_init` restarts.
/// Restart `i` draws from a generator derived from `(seed, i)`.
pub fn kmeans<T: Scalar>(points: &[Vec<T>], cfg: &KmeansConfig<T>) -> Result<ClusterResult<T>> {
    let dim = check_points(points)?;
    cfg.validate(points.len())?;
    let mut best: Option<ClusterResult<T>> = None;
    for restart in 0..cfg.n_init {
        let mut rng = Rng::derive(cfg.seed, restart as u64);
        let run = lloyd(points, cfg, &mut rng, dim)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

pub const BRUTE_FORCE_MAX_POINTS: usize = 10;
pub const BRUTE_FORCE_MAX_K: usize = 4;

/// Globally optimal clustering by enumerating every partition of the points
/// into exactly `k` non-empty parts (restricted growth strings).
pub fn brute_force_cluster<T: Scalar>(points: &[Vec<T>], k: usize) -> Result<ClusterResult<T>> {
    let dim = check_points(points)?;
    let n = points.len();
    if n > BRUTE_FORCE_MAX_POINTS || k > BRUTE_FORCE_MAX_K {
        return Err(Error::TooLarge(format!(
            "n={n}, k={k} (limits n<={BRUTE_FORCE_MAX_POINTS}, k<={BRUTE_FORCE_MAX_K})"
        )));
    }
    if k == 0 || k > n {
        return Err(Error::Domain(format!("k={k} with {n} points")));
    }
    let mut labels = vec![0usize; n];
    let mut best: Option<(T, Vec<usize>)> = None;
    enumerate(points, k, dim, 1, 1, &mut labels, &mut best);
    let (inertia, assignments) = best.expect("k <= n has a partition");
    let centroids = means(points, &assignments, k, dim);
    Ok(ClusterResult { assignments, centroids, inertia, iterations_run: 0, inertia_trace: vec![inertia] })
}

fn enumerate<T: Scalar>(
    points: &[Vec<T>],
    k: usize,
    dim: usize,
    idx: usize,
    used: usize,
    labels: &mut Vec<usize>,
    best: &mut Option<(T, Vec<usize>)>,
) {
    let n = points.len();
    if n - idx < k - used {
        return;
    }
    if idx == n {
        let centroids = means(points, labels, k, dim);
        let inertia = inertia_of(points, labels, &centroids);
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            *best = Some((inertia, labels.clone()));
        }
        return;
    }
    for label in 0..used.min(k) {
        labels[idx] = label;
        enumerate(points, k, dim, idx + 1, used, labels, best);
    }
    if used < k {
        labels[idx] = used;
        enumerate(points, k, dim, idx + 1, used + 1, labels, best);
    }
}
