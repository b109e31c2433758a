//! Seeded synthetic data: Gaussian-mixture item embeddings, co-engagement
//! pairs among mixture mates, and a small interaction corpus with metadata.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{CoEngagementSet, Event, ItemMeta};
use crate::embed::EmbeddingStore;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSpec {
    pub points: usize,
    pub dim: usize,
    pub components: usize,
    /// Standard deviation of the component means around the origin.
    pub center_scale: f64,
    /// Within-component standard deviation.
    pub spread: f64,
    pub seed: u64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            points: 20_000,
            dim: 32,
            components: 256,
            center_scale: 1.0,
            spread: 0.25,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mixture {
    pub store: EmbeddingStore,
    /// Component index per item, in store order.
    pub labels: Vec<usize>,
}

pub fn item_id(i: usize) -> String {
    format!("item{i:05}")
}

/// Points drawn from an equal-weight isotropic Gaussian mixture.
pub fn gaussian_mixture(spec: &MixtureSpec) -> Result<Mixture> {
    if spec.points == 0 || spec.dim == 0 || spec.components == 0 {
        return Err(Error::Config(format!("degenerate mixture spec {spec:?}")));
    }
    let mut rng = seed::rng(seed::derive(spec.seed, "mixture"));
    let centers = Normal::new(0.0, spec.center_scale)
        .map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, spec.spread).map_err(|e| Error::Config(e.to_string()))?;
    let means: Vec<Vec<f64>> = (0..spec.components)
        .map(|_| (0..spec.dim).map(|_| centers.sample(&mut rng)).collect())
        .collect();
    let mut store = EmbeddingStore::new(spec.dim);
    let mut labels = Vec::with_capacity(spec.points);
    for i in 0..spec.points {
        let c = rng.random_range(0..spec.components);
        let v: Vec<f64> = means[c].iter().map(|m| m + noise.sample(&mut rng)).collect();
        store.insert(item_id(i), v)?;
        labels.push(c);
    }
    Ok(Mixture { store, labels })
}

/// Each item is paired with up to `per_item` random mates from its own
/// component.
pub fn mixture_co_engagement(mix: &Mixture, per_item: usize, seed: u64) -> CoEngagementSet {
    let mut members: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for (id, &c) in mix.store.ids().iter().zip(&mix.labels) {
        members.entry(c).or_default().push(id);
    }
    let mut rng = seed::rng(seed::derive(seed, "mixture-pairs"));
    let mut pairs = Vec::new();
    for (id, c) in mix.store.ids().iter().zip(&mix.labels) {
        let mates: Vec<&str> = members[c].iter().copied().filter(|m| m != id).collect();
        for m in mates.choose_multiple(&mut rng, per_item) {
            pairs.push((id.as_str(), *m));
        }
    }
    CoEngagementSet::from_pairs(mix.store.ids().iter().cloned(), pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub users: usize,
    pub items: usize,
    /// Items per leaf category.
    pub items_per_category: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of moving to one of the current item's successors
    /// rather than to a uniformly random item.
    pub follow_prob: f64,
    /// Successor offsets: item `i` leads to item `i + offset` (mod items).
    pub successor_offsets: Vec<usize>,
    /// Relative weights of the successors.
    pub successor_weights: Vec<f64>,
    pub dim: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            users: 220,
            items: 120,
            items_per_category: 8,
            min_len: 6,
            max_len: 12,
            follow_prob: 0.85,
            successor_offsets: vec![1, 7, 19, 31, 53],
            successor_weights: vec![0.3, 0.25, 0.2, 0.15, 0.1],
            dim: 16,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub events: Vec<Event>,
    pub metadata: BTreeMap<String, ItemMeta>,
    pub embeddings: EmbeddingStore,
}

const DEPARTMENTS: [&str; 4] = ["Hair Care", "Skin Care", "Makeup", "Fragrance"];
const KINDS: [&str; 8] = [
    "Conditioner", "Shampoo", "Serum", "Cream", "Spray", "Oil", "Mask", "Lotion",
];

/// Users walk a weighted successor graph over items: with probability
/// `follow_prob` the next item is one of the current item's successors,
/// otherwise a uniformly random item. Items in the same leaf category
/// share an embedding center.
pub fn synthetic_corpus(spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    if spec.items < 2 || spec.items_per_category == 0 || spec.min_len < 3 || spec.max_len < spec.min_len {
        return Err(Error::Config(format!("degenerate corpus spec {spec:?}")));
    }
    if spec.successor_offsets.len() != spec.successor_weights.len() {
        return Err(Error::Config("successor offsets and weights differ in length".into()));
    }
    let next = if spec.successor_offsets.is_empty() {
        None
    } else {
        Some(WeightedIndex::new(&spec.successor_weights).map_err(|e| Error::Config(e.to_string()))?)
    };
    let mut rng = seed::rng(seed::derive(spec.seed, "corpus"));
    let ids: Vec<String> = (0..spec.items).map(|i| format!("p{i:04}")).collect();

    let n_categories = spec.items.div_ceil(spec.items_per_category);
    let unit = Normal::new(0.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let centers: Vec<Vec<f64>> = (0..n_categories)
        .map(|_| (0..spec.dim).map(|_| unit.sample(&mut rng)).collect())
        .collect();
    let mut metadata = BTreeMap::new();
    let mut embeddings = EmbeddingStore::new(spec.dim);
    for (i, id) in ids.iter().enumerate() {
        let cat = i / spec.items_per_category;
        let dept = DEPARTMENTS[cat % DEPARTMENTS.len()];
        let kind = KINDS[(cat / DEPARTMENTS.len()) % KINDS.len()];
        let leaf = format!("{kind}s {}", cat / (DEPARTMENTS.len() * KINDS.len()) + 1);
        metadata.insert(
            id.clone(),
            ItemMeta {
                item_id: id.clone(),
                title: format!("Brand {} {kind} No. {i}", (b'A' + (i % 26) as u8) as char),
                categories: vec!["Beauty".into(), dept.into(), leaf],
            },
        );
        let v: Vec<f64> = centers[cat].iter().map(|c| c + 0.2 * unit.sample(&mut rng)).collect();
        embeddings.insert(id.clone(), v)?;
    }

    let mut events = Vec::new();
    for u in 0..spec.users {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut cur = rng.random_range(0..spec.items);
        let start = 1_600_000_000 + rng.random_range(0..1_000_000i64);
        for t in 0..len {
            events.push(Event {
                user_id: format!("u{u:04}"),
                item_id: ids[cur].clone(),
                timestamp: start + 3600 * t as i64,
            });
            cur = match &next {
                Some(w) if rng.random_bool(spec.follow_prob) => {
                    (cur + spec.successor_offsets[w.sample(&mut rng)]) % spec.items
                }
                _ => rng.random_range(0..spec.items),
            };
        }
    }
    Ok(SyntheticCorpus {
        events,
        metadata,
        embeddings,
    })
}
