//! Lloyd's k-means with k-means++ seeding. Distances are accumulated in f64.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub seed: u64,
    pub max_iters: usize,
    /// Stop when the objective improves by less than this fraction.
    pub tol: f64,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions { seed: 7, max_iters: 25, tol: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub k: usize,
    pub dim: usize,
    /// `k x dim`, each row the mean of its assigned points.
    pub centroids: Vec<f64>,
    pub assignment: Vec<u32>,
    /// Mean squared distance to the assigned centroid, one entry per iteration.
    pub objective_history: Vec<f64>,
}

impl KMeansResult {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a as usize] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KMeansError {
    NoPoints,
    ZeroClusters,
    TooManyClusters { k: usize, points: usize },
    Shape,
}

impl fmt::Display for KMeansError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KMeansError::NoPoints => f.write_str("k-means needs at least one point"),
            KMeansError::ZeroClusters => f.write_str("k must be at least 1"),
            KMeansError::TooManyClusters { k, points } => write!(f, "k={k} exceeds the number of points ({points})"),
            KMeansError::Shape => f.write_str("vector buffer length is not a multiple of the dimension"),
        }
    }
}

impl core::error::Error for KMeansError {}

fn sq_dist(x: &[f64], c: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, b) in x.iter().zip(c) {
        let d = a - b;
        s += d * d;
    }
    s
}

/// Clusters the `dim`-wide rows of `vectors` into `k` groups.
pub fn kmeans(vectors: &[f32], dim: usize, k: usize, options: &KMeansOptions) -> Result<KMeansResult, KMeansError> {
    if dim == 0 || vectors.len() % dim != 0 {
        return Err(KMeansError::Shape);
    }
    let n = vectors.len() / dim;
    if n == 0 {
        return Err(KMeansError::NoPoints);
    }
    if k == 0 {
        return Err(KMeansError::ZeroClusters);
    }
    if k > n {
        return Err(KMeansError::TooManyClusters { k, points: n });
    }
    let points: Vec<f64> = vectors.iter().map(|&v| v as f64).collect();
    let point = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut centroids = seed_plus_plus(&points, dim, k, &mut rng);
    let mut assignment = vec![u32::MAX; n];
    let mut history = Vec::new();
    let mut c_norms = vec![0.0; k];

    for iter in 0..options.max_iters.max(1) {
        for c in 0..k {
            let row = &centroids[c * dim..(c + 1) * dim];
            c_norms[c] = linalg::dot(row, row);
        }
        for i in 0..n {
            let x = point(i);
            let score = |c: usize| c_norms[c] - 2.0 * linalg::dot(x, &centroids[c * dim..(c + 1) * dim]);
            let current = assignment[i];
            let (mut best, mut best_d) = if current == u32::MAX {
                (0u32, score(0))
            } else {
                (current, score(current as usize))
            };
            for c in 0..k {
                let d = score(c);
                if d < best_d {
                    best = c as u32;
                    best_d = d;
                }
            }
            assignment[i] = best;
        }
        repair_empty(&points, dim, k, &mut assignment, &mut centroids);

        let total: f64 = (0..n)
            .map(|i| {
                let c = assignment[i] as usize;
                sq_dist(point(i), &centroids[c * dim..(c + 1) * dim])
            })
            .sum();
        let objective = total / n as f64;
        let previous = history.last().copied();
        history.push(objective);

        centroids = means(&points, dim, k, &assignment);
        if iter > 0 {
            if let Some(prev) = previous {
                if prev - objective <= options.tol * prev {
                    break;
                }
            }
        }
    }
    Ok(KMeansResult { k, dim, centroids, assignment, objective_history: history })
}

/// k-means++: first centre uniform, then proportional to squared distance to
/// the nearest chosen centre. Falls back to a uniform unchosen point when all
/// remaining points coincide with a centre.
fn seed_plus_plus(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut chosen = vec![false; n];
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    centroids.extend_from_slice(point(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(point(i), point(first))).collect();
    for _ in 1..k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.unwrap_or(0)
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[next] = true;
        let c = point(next).to_vec();
        for i in 0..n {
            let d = sq_dist(point(i), &c);
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Moves the point farthest from its centroid (taken from clusters with more
/// than one member) into each empty cluster.
fn repair_empty(points: &[f64], dim: usize, k: usize, assignment: &mut [u32], centroids: &mut [f64]) {
    let mut sizes = vec![0usize; k];
    for &a in assignment.iter() {
        sizes[a as usize] += 1;
    }
    if sizes.iter().all(|&s| s > 0) {
        return;
    }
    let n = assignment.len();
    let mut dist: Vec<f64> = (0..n)
        .map(|i| {
            let c = assignment[i] as usize;
            sq_dist(&points[i * dim..(i + 1) * dim], &centroids[c * dim..(c + 1) * dim])
        })
        .collect();
    for e in 0..k {
        if sizes[e] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for i in 0..n {
            if sizes[assignment[i] as usize] > 1 && far.map_or(true, |f| dist[i] > dist[f]) {
                far = Some(i);
            }
        }
        let i = far.expect("k <= n guarantees a donor cluster");
        sizes[assignment[i] as usize] -= 1;
        assignment[i] = e as u32;
        sizes[e] = 1;
        dist[i] = 0.0;
        centroids[e * dim..(e + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
    }
}

fn means(points: &[f64], dim: usize, k: usize, assignment: &[u32]) -> Vec<f64> {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignment.iter().enumerate() {
        let c = a as usize;
        counts[c] += 1;
        for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(&points[i * dim..(i + 1) * dim]) {
            *s += x;
        }
    }
    for c in 0..k {
        let inv = 1.0 / counts[c].max(1) as f64;
        sums[c * dim..(c + 1) * dim].iter_mut().for_each(|s| *s *= inv);
    }
    sums
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::standard_normal;
    use proptest::prelude::*;

    fn blobs(seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Vec::new();
        for i in 0..100 {
            let centre = if i % 2 == 0 { 10.0 } else { -10.0 };
            v.push((centre + standard_normal(&mut rng)) as f32);
            v.push(standard_normal(&mut rng) as f32);
        }
        v
    }

    #[test]
    fn recovers_separated_blobs() {
        let r = kmeans(&blobs(1), 2, 2, &KMeansOptions::default()).unwrap();
        for i in 0..100 {
            assert_eq!(r.assignment[i], r.assignment[i % 2]);
        }
        assert_ne!(r.assignment[0], r.assignment[1]);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let v = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = kmeans(&v, 2, 1, &KMeansOptions::default()).unwrap();
        assert_eq!(r.centroids, vec![3.0, 4.0]);
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let v = [0.0f32, 1.0, 2.0, 3.0, 4.0];
        let r = kmeans(&v, 1, 5, &KMeansOptions::default()).unwrap();
        assert_eq!(r.cluster_sizes(), vec![1; 5]);
        assert_eq!(*r.objective_history.last().unwrap(), 0.0);
    }

    #[test]
    fn identical_points_still_fill_every_cluster() {
        let v = [1.0f32; 12];
        let r = kmeans(&v, 2, 3, &KMeansOptions::default()).unwrap();
        assert!(r.cluster_sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn rejects_bad_k() {
        assert_eq!(
            kmeans(&[0.0, 1.0], 1, 3, &KMeansOptions::default()).unwrap_err(),
            KMeansError::TooManyClusters { k: 3, points: 2 }
        );
        assert_eq!(kmeans(&[0.0], 1, 0, &KMeansOptions::default()).unwrap_err(), KMeansError::ZeroClusters);
    }

    #[test]
    fn same_seed_same_result() {
        let v = blobs(2);
        let o = KMeansOptions { seed: 3, ..Default::default() };
        assert_eq!(kmeans(&v, 2, 5, &o).unwrap(), kmeans(&v, 2, 5, &o).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn objective_never_increases(seed in 0u64..1000, k in 1usize..12, n in 12usize..80) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v: Vec<f32> = (0..n * 3).map(|_| standard_normal(&mut rng) as f32).collect();
            let r = kmeans(&v, 3, k, &KMeansOptions { seed, max_iters: 30, tol: 0.0 }).unwrap();
            for w in r.objective_history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
            }
            prop_assert!(r.cluster_sizes().iter().all(|&s| s > 0));
        }
    }
}
