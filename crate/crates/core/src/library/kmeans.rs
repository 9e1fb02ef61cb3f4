//! Lloyd's k-means with k-means++ seeding over flat, fixed-dimension vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once no centroid moves farther than this (Euclidean).
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 100,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// `k * dim` centroid coordinates, row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl KMeansResult {
    pub fn centroid(&self, c: usize, dim: usize) -> &[f64] {
        &self.centroids[c * dim..(c + 1) * dim]
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Flat view of `count` points of dimension `dim`.
struct Points<'a> {
    data: &'a [f64],
    dim: usize,
}

impl Points<'_> {
    fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Nearest centroid (lowest index on ties) and its squared distance.
fn nearest(point: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init(points: &Points, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len();
    let dim = points.dim;
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = points.get(first).to_vec();
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.get(i), points.get(first))).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    if target < d {
                        idx = i;
                        break;
                    }
                    target -= d;
                }
            }
            // Rounding can leave `target` past the end; fall back to the last positive weight.
            if d2[idx] == 0.0 {
                idx = d2.iter().rposition(|&d| d > 0.0).unwrap_or(idx);
            }
            idx
        } else {
            // All remaining points coincide with a centroid.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let p = points.get(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.get(i), &p));
        }
        centroids.extend(p);
    }
    centroids
}

/// Clusters `data` (row-major points of dimension `dim`).
///
/// Empty clusters are re-seeded with the point farthest from its centroid.
/// Results depend only on the inputs and the seed.
pub fn kmeans(data: &[f64], dim: usize, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} values do not form points of dimension {dim}",
            data.len()
        )));
    }
    let points = Points { data, dim };
    let n = points.len();
    if cfg.k == 0 {
        return Err(Error::param("k must be positive"));
    }
    if n == 0 {
        return Err(Error::EmptyInput("no points to cluster".into()));
    }
    if cfg.k > n {
        return Err(Error::param(format!("k = {} exceeds the {n} points", cfg.k)));
    }
    let k = cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centroids = plus_plus_init(&points, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut inertia_history = Vec::new();
    let mut iterations = 0;

    loop {
        let assigned: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest(points.get(i), &centroids, dim))
            .collect();
        for (i, (c, d)) in assigned.into_iter().enumerate() {
            assignments[i] = c;
            dists[i] = d;
        }
        inertia_history.push(dists.iter().sum());
        if iterations >= cfg.max_iter {
            break;
        }
        iterations += 1;

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(points.get(i)) {
                *s += v;
            }
        }
        let mut new_centroids = sums;
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                new_centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .for_each(|v| *v *= inv);
            } else {
                // Farthest point not already used to re-seed this round.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("k <= n leaves a free point");
                taken[far] = true;
                dists[far] = 0.0;
                new_centroids[c * dim..(c + 1) * dim].copy_from_slice(points.get(far));
            }
        }
        let shift = new_centroids
            .chunks_exact(dim)
            .zip(centroids.chunks_exact(dim))
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = new_centroids;
        if shift < cfg.tol {
            // Final assignment against the converged centroids.
            let assigned: Vec<(usize, f64)> = (0..n)
                .into_par_iter()
                .map(|i| nearest(points.get(i), &centroids, dim))
                .collect();
            for (i, (c, d)) in assigned.into_iter().enumerate() {
                assignments[i] = c;
                dists[i] = d;
            }
            inertia_history.push(dists.iter().sum());
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        iterations,
        inertia_history,
    })
}
