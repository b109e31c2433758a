//! Residual quantization of item embeddings.
//!
//! Level `k` quantizes the residual left by levels `< k`:
//!
//! ```text
//! r_1 = h,   z_k = argmin_j |r_k - e_j^(k)|^2,   q_k = e_{z_k}^(k),   r_{k+1} = r_k - q_k
//! ```
//!
//! and the reconstruction is `ĥ = Σ_k q_k`. Codebooks are initialized by
//! k-means++ on the residuals level by level and then refined by
//! [`train::train_epoch`], optionally with EMA updates, a diversity
//! regularizer, and dead-code resets. At tokenization time the last `M`
//! levels may be drawn uniformly instead of greedily.

mod checkpoint;
pub mod kmeans;
pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_FORMAT};
pub use kmeans::{kmeans, kmeanspp_init, kmeanspp_seed, KMeansParams, KMeansResult};
pub use train::{train, train_epoch, EpochStats, Trained};

use crate::embed::EmbeddingStore;
use crate::error::{Error, Result};
use crate::seed;
use crate::vector::{squared_distance, Matrix};

/// One level's centroids plus usage bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Matrix,
    /// Assignments accumulated over the whole training run.
    usage: Vec<u64>,
    /// Consecutive batches each entry has gone unused.
    unused_streak: Vec<u32>,
}

impl Codebook {
    pub fn new(centroids: Matrix) -> Result<Self> {
        if centroids.rows() == 0 {
            return Err(Error::Config(format!(
                "a codebook needs at least 1 entry, got {}",
                centroids.rows()
            )));
        }
        if centroids.as_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite centroid".into()));
        }
        let n = centroids.rows();
        Ok(Self {
            centroids,
            usage: vec![0; n],
            unused_streak: vec![0; n],
        })
    }

    pub fn len(&self) -> usize {
        self.centroids.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn entry(&self, j: usize) -> &[f64] {
        self.centroids.row(j)
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn unused_streak(&self) -> &[u32] {
        &self.unused_streak
    }

    /// Record one batch of per-entry assignment counts.
    pub fn record_batch(&mut self, counts: &[u64]) {
        for ((u, s), &c) in self.usage.iter_mut().zip(&mut self.unused_streak).zip(counts) {
            *u += c;
            *s = if c == 0 { *s + 1 } else { 0 };
        }
    }
}

/// `K` ordered codebooks over vectors of one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookStack {
    dim: usize,
    levels: Vec<Codebook>,
}

impl CodebookStack {
    pub fn new(levels: Vec<Codebook>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::Config("a codebook stack needs at least one level".into()))?;
        let dim = first.centroids.dim();
        for l in &levels {
            if l.centroids.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: l.centroids.dim(),
                });
            }
        }
        Ok(Self { dim, levels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, k: usize) -> &Codebook {
        &self.levels[k]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut Codebook {
        &mut self.levels[k]
    }

    pub fn levels(&self) -> &[Codebook] {
        &self.levels
    }

    pub fn codebook_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(Codebook::len).collect()
    }

    /// Centroids only; usage counters are zero.
    pub fn from_centroids(levels: Vec<Matrix>) -> Result<Self> {
        Self::new(levels.into_iter().map(Codebook::new).collect::<Result<_>>()?)
    }
}

/// Output of [`quantize`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    pub codes: Vec<usize>,
    /// `r_1 ..= r_{K+1}`; `r_1` is the input vector.
    pub residuals: Vec<Vec<f64>>,
    /// `q_1 ..= q_K`.
    pub quantized: Vec<Vec<f64>>,
    pub reconstruction: Vec<f64>,
}

impl QuantizeResult {
    pub fn final_residual(&self) -> &[f64] {
        self.residuals.last().expect("at least r_1")
    }
}

/// Nearest entry of level `k` to `residual`; ties go to the lowest index.
pub fn assign(residual: &[f64], level: usize, stack: &CodebookStack) -> Result<(usize, Vec<f64>)> {
    let book = stack
        .levels
        .get(level)
        .ok_or_else(|| Error::Domain(format!("level {level} out of range")))?;
    if residual.len() != stack.dim {
        return Err(Error::DimensionMismatch {
            expected: stack.dim,
            actual: residual.len(),
        });
    }
    let (j, _) = book.centroids.nearest(residual);
    Ok((j, book.entry(j).to_vec()))
}

/// Quantize `h` through every level. Levels `> K - random_last` draw their
/// index uniformly from that level's codebook using `rng`; the others are
/// greedy. `random_last` may equal `K`.
pub fn quantize<R: Rng + ?Sized>(
    h: &[f64],
    stack: &CodebookStack,
    random_last: usize,
    rng: &mut R,
) -> Result<QuantizeResult> {
    if h.len() != stack.dim {
        return Err(Error::DimensionMismatch {
            expected: stack.dim,
            actual: h.len(),
        });
    }
    let k_total = stack.num_levels();
    if random_last > k_total {
        return Err(Error::Config(format!(
            "cannot randomize {random_last} of {k_total} levels"
        )));
    }
    let greedy_levels = k_total - random_last;
    let mut residual = h.to_vec();
    let mut out = QuantizeResult {
        codes: Vec::with_capacity(k_total),
        residuals: vec![residual.clone()],
        quantized: Vec::with_capacity(k_total),
        reconstruction: vec![0.0; h.len()],
    };
    for (k, book) in stack.levels.iter().enumerate() {
        let z = if k < greedy_levels {
            book.centroids.nearest(&residual).0
        } else {
            rng.random_range(0..book.len())
        };
        let q = book.entry(z);
        for ((r, rec), qi) in residual.iter_mut().zip(&mut out.reconstruction).zip(q) {
            *r -= qi;
            *rec += qi;
        }
        out.codes.push(z);
        out.quantized.push(q.to_vec());
        out.residuals.push(residual.clone());
    }
    Ok(out)
}

/// Greedy codes for every item, in store order.
pub fn encode_all(store: &EmbeddingStore, stack: &CodebookStack) -> Result<Vec<Vec<usize>>> {
    use rayon::prelude::*;
    if store.dim() != stack.dim {
        return Err(Error::DimensionMismatch {
            expected: stack.dim,
            actual: store.dim(),
        });
    }
    store
        .matrix()
        .as_flat()
        .par_chunks_exact(store.dim())
        .map(|h| quantize(h, stack, 0, &mut seed::rng(0)).map(|q| q.codes))
        .collect()
}

/// `γ·e + (1-γ)·candidate`.
pub fn ema_update(entry: &[f64], candidate: &[f64], decay: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Domain(format!("decay must lie in [0, 1], got {decay}")));
    }
    Ok(entry
        .iter()
        .zip(candidate)
        .map(|(e, c)| decay * e + (1.0 - decay) * c)
        .collect())
}

/// `λ_div Σ_k C_k Σ_j p_{k,j}^2` over per-level usage distributions.
pub fn diversity_loss(soft_counts: &[Vec<f64>], weight: f64) -> Result<f64> {
    let mut total = 0.0;
    for (k, p) in soft_counts.iter().enumerate() {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|x| *x < 0.0 || !x.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!(
                "usage distribution at level {k} is not normalized (sum {sum})"
            )));
        }
        total += p.len() as f64 * p.iter().map(|x| x * x).sum::<f64>();
    }
    Ok(weight * total)
}

/// Row-wise `softmax(-|r - e_j|^2 / T)` for each residual.
pub fn soft_assignments(residuals: &Matrix, centroids: &Matrix, temperature: f64) -> Matrix {
    let c = centroids.rows();
    let mut out = Matrix::zeros(residuals.rows(), c);
    for (i, r) in residuals.iter_rows().enumerate() {
        let row = out.row_mut(i);
        for (j, e) in centroids.iter_rows().enumerate() {
            row[j] = -squared_distance(r, e) / temperature;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Batch-mean soft usage `p_j = (1/B) Σ_i s_ij`.
pub fn soft_counts(assignments: &Matrix) -> Vec<f64> {
    let b = assignments.rows() as f64;
    let mut p = vec![0.0; assignments.dim()];
    for row in assignments.iter_rows() {
        for (pj, s) in p.iter_mut().zip(row) {
            *pj += s;
        }
    }
    p.iter_mut().for_each(|x| *x /= b);
    p
}

/// Diversity loss of one level and its gradient with respect to the
/// level's centroids, using soft assignments of `residuals`.
pub fn diversity_level_grad(
    residuals: &Matrix,
    centroids: &Matrix,
    temperature: f64,
    weight: f64,
) -> (f64, Matrix) {
    let s = soft_assignments(residuals, centroids, temperature);
    let p = soft_counts(&s);
    let c = centroids.rows() as f64;
    let b = residuals.rows() as f64;
    let loss = weight * c * p.iter().map(|x| x * x).sum::<f64>();
    // dL/dd_il = -(2 λ C / (B T)) s_il (p_l - Σ_j s_ij p_j),  dd_il/de_l = 2 (e_l - r_i)
    let coef = -4.0 * weight * c / (b * temperature);
    let mut grad = Matrix::zeros(centroids.rows(), centroids.dim());
    for (i, r) in residuals.iter_rows().enumerate() {
        let si = s.row(i);
        let sbar: f64 = si.iter().zip(&p).map(|(a, b)| a * b).sum();
        for (l, e) in centroids.iter_rows().enumerate() {
            let w = coef * si[l] * (p[l] - sbar);
            if w == 0.0 {
                continue;
            }
            for ((g, el), ri) in grad.row_mut(l).iter_mut().zip(e).zip(r) {
                *g += w * (el - ri);
            }
        }
    }
    (loss, grad)
}

/// What [`dead_code_reset`] changed.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResetReport {
    /// `(entry, batch residual index)` pairs.
    pub resets: Vec<(usize, usize)>,
}

/// Reinitialize every entry of `book` whose unused streak reached
/// `threshold` with the batch residual worst fitted by its current code.
///
/// `errors[i]` is `|r_i - e_{z_i}|` for batch residual `i` at this level.
/// The first dead entry takes the argmax residual; further dead entries in
/// the same batch take the next-worst distinct residuals, so no two entries
/// are reset onto the same point.
pub fn dead_code_reset(
    book: &mut Codebook,
    residuals: &Matrix,
    errors: &[f64],
    threshold: u32,
) -> ResetReport {
    let dead: Vec<usize> = (0..book.len())
        .filter(|&j| book.unused_streak[j] >= threshold)
        .collect();
    let mut report = ResetReport::default();
    if dead.is_empty() || residuals.rows() == 0 {
        return report;
    }
    let mut order: Vec<usize> = (0..residuals.rows()).collect();
    // stable sort keeps the lowest index first among equal errors
    order.sort_by(|a, b| errors[*b].total_cmp(&errors[*a]));
    for (j, i) in dead.into_iter().zip(order) {
        book.centroids.row_mut(j).copy_from_slice(residuals.row(i));
        book.unused_streak[j] = 0;
        report.resets.push((j, i));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn stack(levels: &[&[&[f64]]]) -> CodebookStack {
        CodebookStack::from_centroids(
            levels
                .iter()
                .map(|rows| Matrix::from_rows(rows[0].len(), rows).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn assign_exact_and_tie() {
        let s = stack(&[&[&[1.0, 0.0], &[-1.0, 0.0], &[0.0, 5.0]]]);
        let (z, q) = assign(&[0.0, 5.0], 0, &s).unwrap();
        assert_eq!(z, 2);
        assert_eq!(q, vec![0.0, 5.0]);
        assert_eq!(assign(&[0.0, 0.0], 0, &s).unwrap().0, 0);
        assert!(assign(&[0.0], 0, &s).is_err());
        assert!(assign(&[0.0, 0.0], 1, &s).is_err());
    }

    #[test]
    fn residual_out_is_zero_on_exact_match() {
        let s = stack(&[&[&[1.0, 2.0], &[3.0, 4.0]], &[&[0.0, 0.0], &[9.0, 9.0]]]);
        let q = quantize(&[3.0, 4.0], &s, 0, &mut seed::rng(0)).unwrap();
        assert_eq!(q.codes, vec![1, 0]);
        assert_eq!(q.final_residual(), &[0.0, 0.0]);
    }

    #[test]
    fn greedy_quantize_telescopes() {
        let s = stack(&[
            &[&[1.0, 1.0], &[-1.0, 2.0]],
            &[&[0.1, -0.3], &[0.2, 0.2]],
        ]);
        let h = [0.7, 1.9];
        let q = quantize(&h, &s, 0, &mut seed::rng(0)).unwrap();
        let err: f64 = h
            .iter()
            .zip(&q.reconstruction)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let r = q.final_residual();
        assert!((err - (r[0] * r[0] + r[1] * r[1]).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn all_random_levels_are_seed_deterministic() {
        let s = stack(&[
            &[&[1.0], &[2.0], &[3.0]],
            &[&[0.1], &[0.2], &[0.3]],
        ]);
        let a = quantize(&[1.5], &s, 2, &mut rand_chacha::ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = quantize(&[1.5], &s, 2, &mut rand_chacha::ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(quantize(&[1.5], &s, 3, &mut seed::rng(0)).is_err());
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema_update(&[2.0, 0.0], &[0.0, 2.0], 1.0).unwrap(), vec![2.0, 0.0]);
        assert_eq!(ema_update(&[2.0, 0.0], &[0.0, 2.0], 0.0).unwrap(), vec![0.0, 2.0]);
        assert_eq!(ema_update(&[2.0, 0.0], &[0.0, 2.0], 0.5).unwrap(), vec![1.0, 1.0]);
        assert!(ema_update(&[1.0], &[1.0], 1.5).is_err());
    }

    #[test]
    fn diversity_examples() {
        let uniform = vec![vec![0.25; 4], vec![0.5; 2], vec![0.125; 8]];
        assert!((diversity_loss(&uniform, 0.1).unwrap() - 0.3).abs() < 1e-12);
        let collapsed = vec![vec![1.0, 0.0, 0.0, 0.0]];
        assert!((diversity_loss(&collapsed, 0.1).unwrap() - 0.4).abs() < 1e-12);
        assert!(diversity_loss(&[vec![0.5, 0.6]], 0.1).is_err());
        assert!(diversity_loss(&[vec![1.5, -0.5]], 0.1).is_err());
    }

    #[test]
    fn diversity_grad_matches_finite_differences() {
        let mut rng = seed::rng(21);
        let rows = |n: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Matrix {
            let v: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
            Matrix::from_flat(3, v).unwrap()
        };
        let residuals = rows(9, &mut rng);
        let centroids = rows(4, &mut rng);
        let (_, grad) = diversity_level_grad(&residuals, &centroids, 0.7, 0.3);
        let step = 1e-6;
        for j in 0..4 {
            for d in 0..3 {
                let mut plus = centroids.clone();
                plus.row_mut(j)[d] += step;
                let mut minus = centroids.clone();
                minus.row_mut(j)[d] -= step;
                let fd = (diversity_level_grad(&residuals, &plus, 0.7, 0.3).0
                    - diversity_level_grad(&residuals, &minus, 0.7, 0.3).0)
                    / (2.0 * step);
                let an = grad.row(j)[d];
                assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn reset_only_touches_stale_entries() {
        let mut book = Codebook::new(Matrix::from_rows(1, &[[0.0], [5.0], [9.0]]).unwrap()).unwrap();
        let residuals = Matrix::from_rows(1, &[[0.1], [0.4], [-0.2]]).unwrap();
        let errors = [0.1, 0.4, 0.2];
        book.record_batch(&[3, 0, 0]);
        assert!(dead_code_reset(&mut book, &residuals, &errors, 2).resets.is_empty());
        book.record_batch(&[2, 0, 1]);
        let report = dead_code_reset(&mut book, &residuals, &errors, 2);
        assert_eq!(report.resets, vec![(1, 1)]);
        assert_eq!(book.entry(1), &[0.4]);
        assert_eq!(book.unused_streak(), &[0, 0, 0]);
        assert_eq!(book.entry(2), &[9.0]);
    }

    #[test]
    fn all_used_means_no_resets() {
        let mut book = Codebook::new(Matrix::from_rows(1, &[[0.0], [1.0]]).unwrap()).unwrap();
        let residuals = Matrix::from_rows(1, &[[0.0], [1.0]]).unwrap();
        for _ in 0..5 {
            book.record_batch(&[1, 1]);
            assert!(dead_code_reset(&mut book, &residuals, &[0.0, 0.0], 2).resets.is_empty());
        }
    }

    #[test]
    fn codebook_needs_an_entry() {
        assert!(Codebook::new(Matrix::zeros(0, 2)).is_err());
        assert!(Codebook::new(Matrix::from_rows(1, &[[0.0]]).unwrap()).is_ok());
    }
}
