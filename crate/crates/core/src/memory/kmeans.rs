//! k-means++ seeding and mini-batch k-means with per-center step sizes.

use rand::seq::index::sample;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PpnError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub batch_size: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            max_iters: 100,
            tol: 1e-4,
        }
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest center; the lowest index wins ties.
pub fn closest(point: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

fn check_points(points: &[Vec<f64>], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(PpnError::Config("k-means needs K >= 1".into()));
    }
    if points.len() < k {
        return Err(PpnError::Config(format!("{} embeddings cannot form {k} clusters", points.len())));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(PpnError::Contract("embeddings differ in dimension".into()));
    }
    Ok(dim)
}

/// k-means++ seeding: the first center uniformly, each further one with
/// probability proportional to its squared distance to the chosen centers.
pub fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    check_points(points, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // every point coincides with a center already
            rng.random_range(0..points.len())
        };
        let c = points[next].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &c));
        }
        centers.push(c);
    }
    Ok(centers)
}

/// Mini-batch k-means from the given initial centers.
///
/// Each iteration assigns a sampled batch to the current centers, then moves
/// every center toward each of its points with step `1 / count`, where
/// `count` is the number of points the center has absorbed so far. Stops
/// after `max_iters` or when no center moves more than `tol` in an iteration.
pub fn minibatch_kmeans(points: &[Vec<f64>], init: Vec<Vec<f64>>, cfg: &KMeansConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    let k = init.len();
    let dim = check_points(points, k)?;
    if init.iter().any(|c| c.len() != dim) {
        return Err(PpnError::Contract("initial centroids differ from the embedding dimension".into()));
    }
    if cfg.batch_size == 0 {
        return Err(PpnError::Config("k-means batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = init;
    let mut counts = vec![0usize; k];
    let batch = cfg.batch_size.min(points.len());
    for _ in 0..cfg.max_iters {
        let idx = if batch == points.len() {
            (0..batch).collect::<Vec<_>>()
        } else {
            let mut v = sample(&mut rng, points.len(), batch).into_vec();
            v.sort_unstable();
            v
        };
        let labels: Vec<usize> = idx.iter().map(|&i| closest(&points[i], &centers)).collect();
        let before = centers.clone();
        for (&i, &j) in idx.iter().zip(&labels) {
            counts[j] += 1;
            let eta = 1.0 / counts[j] as f64;
            for (c, x) in centers[j].iter_mut().zip(&points[i]) {
                *c += eta * (x - *c);
            }
        }
        let moved = centers
            .iter()
            .zip(&before)
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        if moved < cfg.tol {
            break;
        }
    }
    Ok(centers)
}
