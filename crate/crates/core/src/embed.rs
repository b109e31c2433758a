//! Dense item embeddings and contrastive refinement.
//!
//! Similarity is temperature-scaled cosine similarity and the refinement
//! objective is a multi-positive InfoNCE loss over co-engaged items. The
//! embeddings themselves are the trainable parameters; gradients are
//! computed analytically, including the chain rule through L2
//! normalization.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::CoEngagementSet;
use crate::error::{Error, Result};
use crate::seed;
use crate::vector::{dot, norm, Matrix};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"SIDEMB1\0";

/// Item embeddings of a shared dimension, kept in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Matrix,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            ids: Vec::new(),
            index: HashMap::new(),
            vectors: Matrix::zeros(0, dim),
        }
    }

    pub fn from_parts(ids: Vec<String>, vectors: Matrix) -> Result<Self> {
        if ids.len() != vectors.rows() {
            return Err(Error::DimensionMismatch {
                expected: ids.len(),
                actual: vectors.rows(),
            });
        }
        let mut store = Self::new(vectors.dim());
        for (id, row) in ids.into_iter().zip(vectors.iter_rows()) {
            store.insert(id, row.to_vec())?;
        }
        Ok(store)
    }

    /// Insert or replace an item's vector.
    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: vector.len(),
            });
        }
        if let Some(bad) = vector.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("non-finite embedding component {bad}")));
        }
        let id = id.into();
        match self.index.get(&id) {
            Some(&i) => self.vectors.row_mut(i).copy_from_slice(&vector),
            None => {
                self.index.insert(id.clone(), self.ids.len());
                self.ids.push(id);
                self.vectors.push_row(&vector)?;
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|i| self.vectors.row(i))
    }

    pub fn vector(&self, id: &str) -> Result<&[f64]> {
        self.get(id).ok_or_else(|| Error::UnknownItem(id.to_owned()))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.vectors
    }

    /// Restrict to the given ids, in the given order.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut out = Self::new(self.dim());
        for id in ids {
            out.insert(id, self.vector(id)?.to_vec())?;
        }
        Ok(out)
    }

    /// Write the binary format: magic, u32 count, u32 dim, then per item a
    /// u16 id length, UTF-8 id, and `dim` little-endian f32 values.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(EMBEDDING_MAGIC)?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        for (id, row) in self.ids.iter().zip(self.vectors.iter_rows()) {
            w.write_all(&(id.len() as u16).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for v in row {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let fmt = |m: &str| Error::Format(format!("embedding file: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| fmt("truncated header"))?;
        if &magic != EMBEDDING_MAGIC {
            return Err(fmt("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(|_| fmt("truncated header"))?;
        let count = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf).map_err(|_| fmt("truncated header"))?;
        let dim = u32::from_le_bytes(u32buf) as usize;
        if dim == 0 {
            return Err(fmt("zero dimension"));
        }
        let mut store = Self::new(dim);
        let mut row = vec![0f64; dim];
        for _ in 0..count {
            let mut lenbuf = [0u8; 2];
            r.read_exact(&mut lenbuf).map_err(|_| fmt("truncated record"))?;
            let mut idbuf = vec![0u8; u16::from_le_bytes(lenbuf) as usize];
            r.read_exact(&mut idbuf).map_err(|_| fmt("truncated record"))?;
            let id = String::from_utf8(idbuf).map_err(|_| fmt("item id is not UTF-8"))?;
            for v in row.iter_mut() {
                r.read_exact(&mut u32buf).map_err(|_| fmt("truncated record"))?;
                *v = f32::from_le_bytes(u32buf) as f64;
            }
            if store.position(&id).is_some() {
                return Err(fmt(&format!("duplicate item id {id}")));
            }
            store.insert(id, row.clone())?;
        }
        Ok(store)
    }

    /// Read JSON-lines of `{"item_id": ..., "embedding": [...]}`.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            item_id: String,
            #[serde(alias = "vector")]
            embedding: Vec<f64>,
        }
        let rows: Vec<Row> = crate::corpus::read_jsonl(r, Path::new("<embeddings>"))?;
        let first = rows
            .first()
            .ok_or_else(|| Error::Empty("embedding file has no rows".into()))?;
        let mut store = Self::new(first.embedding.len());
        for row in rows {
            store.insert(row.item_id, row.embedding)?;
        }
        Ok(store)
    }

    /// Load from disk, detecting the binary format by its magic bytes and
    /// falling back to JSON-lines.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut magic = [0u8; 8];
        let n = file.read(&mut magic).map_err(|e| Error::io(path, e))?;
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        if n == 8 && &magic == EMBEDDING_MAGIC {
            Self::read_binary(BufReader::new(file))
        } else {
            Self::read_jsonl(BufReader::new(file))
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_binary(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Gradient accumulated for one row of the store.
type GradRow = (usize, Vec<f64>);

/// Temperature-scaled cosine similarity `(h_i/|h_i|) . (h_j/|h_j|) / T`.
pub fn similarity(a: &[f64], b: &[f64], temperature: f64) -> Result<f64> {
    if temperature <= 0.0 {
        return Err(Error::Domain(format!("temperature must be > 0, got {temperature}")));
    }
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("similarity of a zero-norm vector".into()));
    }
    Ok(dot(a, b) / (na * nb) / temperature)
}

/// Gradients of the contrastive loss with respect to the raw vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrad {
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

fn unit(v: &[f64]) -> Result<(Vec<f64>, f64)> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Domain("contrastive term on a zero-norm vector".into()));
    }
    Ok((v.iter().map(|x| x / n).collect(), n))
}

/// Project `g` (a gradient w.r.t. the unit vector `u = h/|h|`) back onto
/// the raw vector: `(g - u (u.g)) / |h|`.
fn through_normalization(g: &[f64], u: &[f64], n: f64) -> Vec<f64> {
    let ug = dot(u, g);
    g.iter().zip(u).map(|(gi, ui)| (gi - ui * ug) / n).collect()
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Multi-positive InfoNCE loss for one anchor over raw vectors.
///
/// `-(1/|P|) Σ_p log[ exp(s_p) / (exp(s_p) + Σ_n exp(s_n)) ]`
pub fn contrastive_loss_vectors(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    temperature: f64,
) -> Result<f64> {
    contrastive_terms(anchor, positives, negatives, temperature, false).map(|(l, _)| l)
}

/// Loss and analytic gradient for one anchor over raw vectors.
pub fn contrastive_grad_vectors(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    temperature: f64,
) -> Result<(f64, ContrastiveGrad)> {
    contrastive_terms(anchor, positives, negatives, temperature, true)
        .map(|(l, g)| (l, g.expect("gradient requested")))
}

fn contrastive_terms(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    temperature: f64,
    want_grad: bool,
) -> Result<(f64, Option<ContrastiveGrad>)> {
    if positives.is_empty() {
        return Err(Error::Domain("contrastive loss needs at least one positive".into()));
    }
    if temperature <= 0.0 {
        return Err(Error::Domain(format!("temperature must be > 0, got {temperature}")));
    }
    let dim = anchor.len();
    for v in positives.iter().chain(negatives) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: v.len(),
            });
        }
    }
    let (ua, na) = unit(anchor)?;
    let up: Vec<(Vec<f64>, f64)> = positives.iter().map(|p| unit(p)).collect::<Result<_>>()?;
    let un: Vec<(Vec<f64>, f64)> = negatives.iter().map(|n| unit(n)).collect::<Result<_>>()?;
    let sp: Vec<f64> = up.iter().map(|(u, _)| dot(&ua, u) / temperature).collect();
    let sn: Vec<f64> = un.iter().map(|(u, _)| dot(&ua, u) / temperature).collect();

    let inv_p = 1.0 / positives.len() as f64;
    let mut loss = 0.0;
    // dL/ds for each similarity
    let mut d_sp = vec![0.0; sp.len()];
    let mut d_sn = vec![0.0; sn.len()];
    for (pi, &s) in sp.iter().enumerate() {
        let lse = log_sum_exp(std::iter::once(s).chain(sn.iter().copied()));
        loss += inv_p * (lse - s);
        if want_grad {
            d_sp[pi] += inv_p * ((s - lse).exp() - 1.0);
            for (ni, &t) in sn.iter().enumerate() {
                d_sn[ni] += inv_p * (t - lse).exp();
            }
        }
    }
    // Rounding can leave a tiny negative value when all negatives vanish.
    let loss = loss.max(0.0);
    if !want_grad {
        return Ok((loss, None));
    }

    // s = ua . u_j / T, so ds/dua = u_j / T and ds/du_j = ua / T.
    let mut g_ua = vec![0.0; dim];
    let mut accumulate = |coef: f64, u: &[f64]| {
        for (g, x) in g_ua.iter_mut().zip(u) {
            *g += coef * x / temperature;
        }
    };
    for (c, (u, _)) in d_sp.iter().zip(&up) {
        accumulate(*c, u);
    }
    for (c, (u, _)) in d_sn.iter().zip(&un) {
        accumulate(*c, u);
    }
    let other = |coef: f64, (u, n): &(Vec<f64>, f64)| -> Vec<f64> {
        let g: Vec<f64> = ua.iter().map(|x| coef * x / temperature).collect();
        through_normalization(&g, u, *n)
    };
    let grad = ContrastiveGrad {
        anchor: through_normalization(&g_ua, &ua, na),
        positives: d_sp.iter().zip(&up).map(|(c, u)| other(*c, u)).collect(),
        negatives: d_sn.iter().zip(&un).map(|(c, u)| other(*c, u)).collect(),
    };
    Ok((loss, Some(grad)))
}

fn lookup<'a>(store: &'a EmbeddingStore, ids: &[&str]) -> Result<Vec<&'a [f64]>> {
    ids.iter().map(|id| store.vector(id)).collect()
}

fn check_membership(anchor: &str, positives: &[&str], negatives: &[&str]) -> Result<()> {
    if positives.iter().chain(negatives).any(|id| *id == anchor) {
        return Err(Error::Domain(format!(
            "anchor {anchor} must not appear among its positives or negatives"
        )));
    }
    Ok(())
}

/// Contrastive loss for `anchor` against positive and negative item ids.
pub fn contrastive_loss(
    anchor: &str,
    positives: &[&str],
    negatives: &[&str],
    store: &EmbeddingStore,
    temperature: f64,
) -> Result<f64> {
    check_membership(anchor, positives, negatives)?;
    contrastive_loss_vectors(
        store.vector(anchor)?,
        &lookup(store, positives)?,
        &lookup(store, negatives)?,
        temperature,
    )
}

/// Gradient of [`contrastive_loss`] keyed by item id. Items appearing more
/// than once have their contributions summed.
pub fn contrastive_grad(
    anchor: &str,
    positives: &[&str],
    negatives: &[&str],
    store: &EmbeddingStore,
    temperature: f64,
) -> Result<BTreeMap<String, Vec<f64>>> {
    check_membership(anchor, positives, negatives)?;
    let (_, g) = contrastive_grad_vectors(
        store.vector(anchor)?,
        &lookup(store, positives)?,
        &lookup(store, negatives)?,
        temperature,
    )?;
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut add = |id: &str, v: Vec<f64>| match out.get_mut(id) {
        Some(acc) => acc.iter_mut().zip(v).for_each(|(a, b)| *a += b),
        None => {
            out.insert(id.to_owned(), v);
        }
    };
    add(anchor, g.anchor);
    for (id, v) in positives.iter().zip(g.positives) {
        add(id, v);
    }
    for (id, v) in negatives.iter().zip(g.negatives) {
        add(id, v);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub negatives: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            negatives: 32,
            learning_rate: 0.05,
            epochs: 10,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("contrastive temperature must be > 0".into()));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("contrastive learning rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("contrastive batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Result of [`refine_embeddings`].
#[derive(Debug, Clone)]
pub struct Refined {
    pub store: EmbeddingStore,
    /// Mean anchor loss per epoch, measured before each batch's update.
    pub epoch_losses: Vec<f64>,
}

/// Mini-batch SGD on the contrastive loss. Anchors are every item in
/// `pairs` with at least one positive that is present in `store`; items
/// without embeddings are ignored. Returns a new store.
pub fn refine_embeddings(
    store: &EmbeddingStore,
    pairs: &CoEngagementSet,
    cfg: &ContrastiveConfig,
) -> Result<Refined> {
    cfg.validate()?;
    let mut current = store.clone();
    let anchors: Vec<usize> = pairs
        .anchors()
        .filter_map(|id| store.position(id))
        .collect();
    let mut order = anchors.clone();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let epoch_seed = seed::derive(cfg.seed, &format!("contrastive-epoch-{epoch}"));
        order.copy_from_slice(&anchors);
        order.shuffle(&mut seed::rng(epoch_seed));
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let snapshot = &current;
            let results: Vec<(f64, Vec<GradRow>)> = batch
                .par_iter()
                .map(|&a| -> Result<_> {
                    let id = &snapshot.ids()[a];
                    let positives: Vec<&str> = pairs
                        .positives(id)
                        .into_iter()
                        .flatten()
                        .map(String::as_str)
                        .filter(|p| snapshot.position(p).is_some())
                        .collect();
                    let mut rng = seed::rng(seed::item_seed(epoch_seed, id));
                    let negatives: Vec<&str> = pairs
                        .sample_negatives(id, cfg.negatives, &mut rng)
                        .into_iter()
                        .filter(|n| snapshot.position(n).is_some())
                        .collect();
                    let pv = lookup(snapshot, &positives)?;
                    let nv = lookup(snapshot, &negatives)?;
                    let (loss, g) =
                        contrastive_grad_vectors(snapshot.matrix().row(a), &pv, &nv, cfg.temperature)?;
                    let mut grads = Vec::with_capacity(1 + pv.len() + nv.len());
                    grads.push((a, g.anchor));
                    for (p, v) in positives.iter().zip(g.positives) {
                        grads.push((snapshot.position(p).unwrap(), v));
                    }
                    for (n, v) in negatives.iter().zip(g.negatives) {
                        grads.push((snapshot.position(n).unwrap(), v));
                    }
                    Ok((loss, grads))
                })
                .collect::<Result<_>>()?;

            let scale = cfg.learning_rate / batch.len() as f64;
            let mut next = current.vectors.clone();
            for (loss, grads) in results {
                total += loss;
                count += 1;
                for (row, g) in grads {
                    for (x, gi) in next.row_mut(row).iter_mut().zip(g) {
                        *x -= scale * gi;
                    }
                }
            }
            current.vectors = next;
        }
        epoch_losses.push(if count == 0 { 0.0 } else { total / count as f64 });
    }
    Ok(Refined {
        store: current,
        epoch_losses,
    })
}
