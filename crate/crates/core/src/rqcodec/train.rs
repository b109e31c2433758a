//! Codebook initialization and training epochs.
//!
//! Every batch first assigns all levels greedily, then updates each level's
//! centroids from the batch. The update candidate is one gradient step on
//! the codebook loss (plus the diversity term when enabled):
//!
//! ```text
//! ẽ = e - η · ∇_e,   ∇_e = 2β · mean_{i: z_i = e}(e - r_i) [+ ∇_e L_div]
//! ```
//!
//! With EMA enabled the entry becomes `γ·e + (1-γ)·ẽ`; without it the
//! candidate replaces the entry directly.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeanspp_init, KMeansParams};
use super::{dead_code_reset, diversity_level_grad, Codebook, CodebookStack};
use crate::embed::EmbeddingStore;
use crate::error::{Error, Result};
use crate::seed;
use crate::vector::Matrix;

/// Switches for the five codebook-balancing techniques.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TechniqueFlags {
    pub ema: bool,
    pub diversity: bool,
    pub dead_code_reset: bool,
    pub random_last: bool,
    pub contrastive_pre: bool,
}

impl Default for TechniqueFlags {
    fn default() -> Self {
        Self {
            ema: true,
            diversity: false,
            dead_code_reset: false,
            random_last: true,
            contrastive_pre: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub codebook_sizes: Vec<usize>,
    pub flags: TechniqueFlags,
    /// EMA decay γ.
    pub decay: f64,
    /// λ_div.
    pub diversity_weight: f64,
    /// Dead-code reset threshold τ, in batches.
    pub reset_threshold: u32,
    /// M, the number of trailing levels drawn at random when `random_last` is on.
    pub random_last_levels: usize,
    /// β, weight of the codebook term.
    pub codebook_weight: f64,
    /// Weight of the commitment term (reported only; the encoder is fixed).
    pub commitment_weight: f64,
    /// Temperature of the soft assignments behind the diversity loss.
    pub soft_temperature: f64,
    /// η, step size of the codebook update candidate.
    pub codebook_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub kmeans: KMeansParams,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            codebook_sizes: vec![256, 256, 256, 256],
            flags: TechniqueFlags::default(),
            decay: 0.97,
            diversity_weight: 0.1,
            reset_threshold: 2,
            random_last_levels: 1,
            codebook_weight: 1.0,
            commitment_weight: 0.25,
            soft_temperature: 1.0,
            codebook_lr: 1.0,
            epochs: 10,
            batch_size: 1024,
            kmeans: KMeansParams::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.codebook_sizes.is_empty() || self.codebook_sizes.contains(&0) {
            return bad(format!("invalid codebook sizes {:?}", self.codebook_sizes));
        }
        if !(0.0..=1.0).contains(&self.decay) {
            return bad(format!("decay must lie in [0, 1], got {}", self.decay));
        }
        if self.reset_threshold < 1 {
            return bad("reset threshold must be >= 1".into());
        }
        if self.flags.random_last && self.random_last_levels >= self.codebook_sizes.len() {
            return bad(format!(
                "random_last_levels must be < {} levels, got {}",
                self.codebook_sizes.len(),
                self.random_last_levels
            ));
        }
        if !(self.soft_temperature > 0.0) {
            return bad("soft temperature must be > 0".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        for (name, v) in [
            ("diversity_weight", self.diversity_weight),
            ("codebook_weight", self.codebook_weight),
            ("commitment_weight", self.commitment_weight),
            ("codebook_lr", self.codebook_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    /// Levels drawn at random during tokenization under these flags.
    pub fn effective_random_last(&self) -> usize {
        if self.flags.random_last {
            self.random_last_levels
        } else {
            0
        }
    }
}

/// Level 1 is clustered on the raw vectors, level `k` on the residuals
/// left by the greedy assignment of levels `< k`.
pub fn rq_kmeans_init(store: &EmbeddingStore, cfg: &TrainConfig) -> Result<CodebookStack> {
    if store.is_empty() {
        return Err(Error::Empty("cannot initialize codebooks from an empty store".into()));
    }
    rq_kmeans_init_matrix(store.matrix(), &cfg.codebook_sizes, cfg.seed, cfg.kmeans)
}

pub fn rq_kmeans_init_matrix(
    points: &Matrix,
    sizes: &[usize],
    seed: u64,
    params: KMeansParams,
) -> Result<CodebookStack> {
    let mut residuals = points.clone();
    let mut levels = Vec::with_capacity(sizes.len());
    for (k, &c) in sizes.iter().enumerate() {
        let centroids = kmeanspp_init(&residuals, c, seed::derive(seed, &format!("rq-kmeans-{k}")), params)?;
        let dim = points.dim();
        let flat: Vec<f64> = residuals
            .as_flat()
            .par_chunks_exact(dim)
            .flat_map_iter(|r| {
                let e = centroids.row(centroids.nearest(r).0);
                r.iter().zip(e).map(|(a, b)| a - b).collect::<Vec<_>>()
            })
            .collect();
        residuals = Matrix::from_flat(dim, flat)?;
        levels.push(Codebook::new(centroids)?);
    }
    CodebookStack::new(levels)
}

/// Per-epoch training statistics. Loss terms are means over items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub reconstruction: f64,
    /// β Σ_k |sg[r_k] - q_k|^2.
    pub codebook: f64,
    /// weight · Σ_k |r_k - sg[q_k]|^2.
    pub commitment: f64,
    /// Mean diversity loss over batches (0 when disabled).
    pub diversity: f64,
    /// Per-level assignment counts for this epoch.
    pub usage: Vec<Vec<u64>>,
    pub resets: usize,
}

impl EpochStats {
    pub fn total_loss(&self) -> f64 {
        self.reconstruction + self.codebook + self.commitment + self.diversity
    }
}

struct Assigned {
    codes: Vec<usize>,
    /// r_1 ..= r_K, flattened level-major.
    residuals: Vec<f64>,
    /// |r_k - q_k| per level.
    errors: Vec<f64>,
    reconstruction: f64,
}

fn assign_item(h: &[f64], stack: &CodebookStack) -> Assigned {
    let k_total = stack.num_levels();
    let mut residual = h.to_vec();
    let mut out = Assigned {
        codes: Vec::with_capacity(k_total),
        residuals: Vec::with_capacity(k_total * h.len()),
        errors: Vec::with_capacity(k_total),
        reconstruction: 0.0,
    };
    for book in stack.levels() {
        let (z, d) = book.centroids().nearest(&residual);
        out.residuals.extend_from_slice(&residual);
        out.codes.push(z);
        out.errors.push(d.sqrt());
        for (r, q) in residual.iter_mut().zip(book.entry(z)) {
            *r -= q;
        }
    }
    out.reconstruction = residual.iter().map(|x| x * x).sum();
    out
}

/// Run one epoch of mini-batch codebook training over `points`.
pub fn train_epoch(
    points: &Matrix,
    stack: &mut CodebookStack,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let n = points.rows();
    if n == 0 {
        return Err(Error::Empty("cannot train on an empty store".into()));
    }
    if points.dim() != stack.dim() {
        return Err(Error::DimensionMismatch {
            expected: stack.dim(),
            actual: points.dim(),
        });
    }
    let dim = points.dim();
    let k_total = stack.num_levels();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(cfg.seed, &format!("rq-epoch-{epoch}"))));

    let mut stats = EpochStats {
        epoch,
        reconstruction: 0.0,
        codebook: 0.0,
        commitment: 0.0,
        diversity: 0.0,
        usage: stack.codebook_sizes().iter().map(|&c| vec![0; c]).collect(),
        resets: 0,
    };
    let mut batches = 0usize;
    let mut quantization_sq = 0.0;

    for batch in order.chunks(cfg.batch_size) {
        let snapshot = &*stack;
        let assigned: Vec<Assigned> = batch
            .par_iter()
            .map(|&i| assign_item(points.row(i), snapshot))
            .collect();
        batches += 1;
        for a in &assigned {
            stats.reconstruction += a.reconstruction;
            quantization_sq += a.errors.iter().map(|e| e * e).sum::<f64>();
        }

        for k in 0..k_total {
            let residuals = Matrix::from_flat(
                dim,
                assigned
                    .iter()
                    .flat_map(|a| a.residuals[k * dim..(k + 1) * dim].iter().copied())
                    .collect(),
            )?;
            let errors: Vec<f64> = assigned.iter().map(|a| a.errors[k]).collect();
            let book = stack.level_mut(k);
            let c = book.len();
            let mut counts = vec![0u64; c];
            let mut sums = vec![0.0; c * dim];
            for (a, r) in assigned.iter().zip(residuals.iter_rows()) {
                let z = a.codes[k];
                counts[z] += 1;
                for (s, x) in sums[z * dim..(z + 1) * dim].iter_mut().zip(r) {
                    *s += x;
                }
            }

            let mut grad = Matrix::zeros(c, dim);
            for j in 0..c {
                if counts[j] == 0 {
                    continue;
                }
                let inv = 1.0 / counts[j] as f64;
                let e = book.entry(j);
                let g = grad.row_mut(j);
                for d in 0..dim {
                    g[d] = 2.0 * cfg.codebook_weight * (e[d] - sums[j * dim + d] * inv);
                }
            }
            if cfg.flags.diversity && cfg.diversity_weight > 0.0 {
                let (loss, dgrad) = diversity_level_grad(
                    &residuals,
                    book.centroids(),
                    cfg.soft_temperature,
                    cfg.diversity_weight,
                );
                stats.diversity += loss;
                let merged: Vec<f64> = grad
                    .as_flat()
                    .iter()
                    .zip(dgrad.as_flat())
                    .map(|(a, b)| a + b)
                    .collect();
                grad = Matrix::from_flat(dim, merged)?;
            }

            let mut updated = book.centroids().clone();
            for j in 0..c {
                let row = updated.row_mut(j);
                let g = grad.row(j);
                for d in 0..dim {
                    let candidate = row[d] - cfg.codebook_lr * g[d];
                    row[d] = if cfg.flags.ema {
                        cfg.decay * row[d] + (1.0 - cfg.decay) * candidate
                    } else {
                        candidate
                    };
                }
            }
            if updated.as_flat().iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!(
                    "codebook level {k} diverged to non-finite values"
                )));
            }
            let mut next = Codebook::new(updated)?;
            next.usage = book.usage.clone();
            next.unused_streak = book.unused_streak.clone();
            next.record_batch(&counts);
            if cfg.flags.dead_code_reset {
                stats.resets +=
                    dead_code_reset(&mut next, &residuals, &errors, cfg.reset_threshold)
                        .resets
                        .len();
            }
            *book = next;
            for (u, c) in stats.usage[k].iter_mut().zip(&counts) {
                *u += c;
            }
        }
    }

    let inv_n = 1.0 / n as f64;
    stats.reconstruction *= inv_n;
    stats.codebook = cfg.codebook_weight * quantization_sq * inv_n;
    stats.commitment = cfg.commitment_weight * quantization_sq * inv_n;
    stats.diversity /= batches as f64;
    Ok(stats)
}

/// Codebook loss `Σ_k |r_k - q_k|^2` averaged over points, under greedy
/// assignment with the current stack.
pub fn mean_quantization_error(points: &Matrix, stack: &CodebookStack) -> f64 {
    let total: f64 = points
        .as_flat()
        .par_chunks_exact(points.dim())
        .map(|h| assign_item(h, stack).errors.iter().map(|e| e * e).sum::<f64>())
        .sum();
    total / points.rows().max(1) as f64
}

/// Mean squared reconstruction error under greedy assignment.
pub fn mean_reconstruction_error(points: &Matrix, stack: &CodebookStack) -> f64 {
    let total: f64 = points
        .as_flat()
        .par_chunks_exact(points.dim())
        .map(|h| assign_item(h, stack).reconstruction)
        .sum();
    total / points.rows().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub stack: CodebookStack,
    pub history: Vec<EpochStats>,
}

/// RQ-k-means initialization followed by `cfg.epochs` training epochs.
pub fn train(store: &EmbeddingStore, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    let stack = rq_kmeans_init(store, cfg)?;
    train_from(store.matrix(), stack, cfg)
}

/// Continue training an already initialized stack.
pub fn train_from(points: &Matrix, mut stack: CodebookStack, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let stats = train_epoch(points, &mut stack, cfg, epoch)?;
        log::debug!(
            "epoch {epoch}: recon {:.5} codebook {:.5} resets {}",
            stats.reconstruction,
            stats.codebook,
            stats.resets
        );
        history.push(stats);
    }
    Ok(Trained { stack, history })
}
