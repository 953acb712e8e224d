//! Lloyd's k-means with k-means++ seeding.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::linalg::{squared_distance, Matrix};
use crate::{Error, Result};

/// Attempts before giving up on degenerate seedings or empty clusters.
pub const MAX_RESTARTS: usize = 10;
const MAX_LLOYD_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: Matrix,
    pub labels: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    /// Independent seedings; the lowest inertia wins.
    pub n_init: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { n_init: 4, seed: 0 }
    }
}

pub fn kmeans(points: &Matrix, k: usize, cfg: &KMeansConfig) -> Result<KMeans> {
    let n = points.rows();
    if k == 0 || n < k {
        return Err(Error::invalid(format!("cannot form {k} clusters from {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<KMeans> = None;
    let mut failures = 0;
    let mut runs = 0;
    while runs < cfg.n_init.max(1) {
        match single_run(points, k, &mut rng) {
            Some(fit) => {
                runs += 1;
                if best.as_ref().map_or(true, |b| fit.inertia < b.inertia) {
                    best = Some(fit);
                }
            }
            None => {
                failures += 1;
                if failures >= MAX_RESTARTS {
                    break;
                }
            }
        }
    }
    best.ok_or_else(|| {
        Error::Degenerate(format!(
            "k-means with k={k} kept producing empty clusters after {MAX_RESTARTS} restarts"
        ))
    })
}

fn nearest(points: &Matrix, centroids: &Matrix, i: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = squared_distance(points.row(i), centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus<R: Rng>(points: &Matrix, k: usize, rng: &mut R) -> Option<Matrix> {
    let n = points.rows();
    let mut chosen = vec![rng.gen_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let dist = WeightedIndex::new(&d2).ok()?;
        let next = dist.sample(rng);
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(points.row(i), points.row(next)));
        }
    }
    Some(points.select_rows(&chosen))
}

/// One seeding plus Lloyd iterations; `None` if a cluster empties.
fn single_run<R: Rng>(points: &Matrix, k: usize, rng: &mut R) -> Option<KMeans> {
    let (n, d) = (points.rows(), points.cols());
    let mut centroids = seed_plus_plus(points, k, rng)?;
    let mut labels = vec![usize::MAX; n];
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        for (i, l) in labels.iter_mut().enumerate() {
            let (c, _) = nearest(points, &centroids, i);
            if *l != c {
                *l = c;
                changed = true;
            }
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, x) in sums.row_mut(l).iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for (c, &cnt) in counts.iter().enumerate() {
            sums.row_mut(c).iter_mut().for_each(|s| *s /= cnt as f64);
        }
        centroids = sums;
        if !changed {
            break;
        }
    }
    let inertia = (0..n)
        .map(|i| squared_distance(points.row(i), centroids.row(labels[i])))
        .sum();
    Some(KMeans {
        centroids,
        labels,
        inertia,
    })
}
