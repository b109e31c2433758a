//! k-means++ seeding followed by Lloyd iterations.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::vector::{squared_distance, Matrix};

/// Lloyd iteration limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansParams {
    pub max_iters: usize,
    /// Stop once the relative SSE improvement of one iteration drops below this.
    pub tolerance: f64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iters: 25,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Within-cluster SSE after seeding and after every Lloyd step.
    pub sse_history: Vec<f64>,
}

/// k-means++ seeding: the first center is uniform, each further center is
/// drawn with probability proportional to squared distance to the nearest
/// chosen center. Points already chosen have zero weight; if every
/// remaining weight is zero (duplicates), an unchosen point is drawn
/// uniformly.
pub fn kmeanspp_seed<R: Rng + ?Sized>(points: &Matrix, k: usize, rng: &mut R) -> Result<Matrix> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::Config("k-means needs at least one centroid".into()));
    }
    if n < k {
        return Err(Error::Domain(format!(
            "k-means needs at least {k} points, got {n}"
        )));
    }
    let mut chosen = vec![false; n];
    let mut centers = Matrix::zeros(0, points.dim());
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centers.push_row(points.row(first))?;
    let mut nearest: Vec<f64> = points
        .iter_rows()
        .map(|p| squared_distance(p, points.row(first)))
        .collect();
    while centers.rows() < k {
        let weights: Vec<f64> = nearest
            .iter()
            .zip(&chosen)
            .map(|(d, c)| if *c { 0.0 } else { *d })
            .collect();
        let next = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(rng),
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|i| !chosen[*i]).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen[next] = true;
        centers.push_row(points.row(next))?;
        let c = points.row(next).to_vec();
        nearest
            .par_iter_mut()
            .zip(points.as_flat().par_chunks_exact(points.dim()))
            .for_each(|(d, p)| *d = d.min(squared_distance(p, &c)));
    }
    Ok(centers)
}

pub(crate) fn assign_all(points: &Matrix, centroids: &Matrix) -> (Vec<usize>, f64) {
    let pairs: Vec<(usize, f64)> = points
        .as_flat()
        .par_chunks_exact(points.dim())
        .map(|p| centroids.nearest(p))
        .collect();
    let sse = pairs.iter().map(|(_, d)| d).sum();
    (pairs.into_iter().map(|(j, _)| j).collect(), sse)
}

/// One Lloyd update: move each centroid to the mean of its points. Empty
/// clusters keep their previous position.
pub(crate) fn lloyd_update(points: &Matrix, assignments: &[usize], centroids: &mut Matrix) {
    let dim = points.dim();
    let k = centroids.rows();
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &j) in points.iter_rows().zip(assignments) {
        counts[j] += 1;
        for (s, x) in sums[j * dim..(j + 1) * dim].iter_mut().zip(p) {
            *s += x;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            let inv = 1.0 / counts[j] as f64;
            for (c, s) in centroids.row_mut(j).iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                *c = s * inv;
            }
        }
    }
}

/// k-means++ seeding plus Lloyd iterations until the relative SSE
/// improvement falls under `params.tolerance` or `max_iters` is reached.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, params: KMeansParams) -> Result<KMeansResult> {
    let mut rng = seed::rng(seed);
    let mut centroids = kmeanspp_seed(points, k, &mut rng)?;
    let (mut assignments, mut sse) = assign_all(points, &centroids);
    let mut sse_history = vec![sse];
    for _ in 0..params.max_iters {
        lloyd_update(points, &assignments, &mut centroids);
        let (next, next_sse) = assign_all(points, &centroids);
        sse_history.push(next_sse);
        let improvement = sse - next_sse;
        assignments = next;
        let done = improvement <= params.tolerance * sse.max(f64::MIN_POSITIVE);
        sse = next_sse;
        if done {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        sse_history,
    })
}

/// Centroids only; see [`kmeans`].
pub fn kmeanspp_init(points: &Matrix, k: usize, seed: u64, params: KMeansParams) -> Result<Matrix> {
    kmeans(points, k, seed, params).map(|r| r.centroids)
}
