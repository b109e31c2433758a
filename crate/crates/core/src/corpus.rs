//! Interaction logs, preprocessing and co-engagement pairs.
//!
//! The preprocessing protocol is the standard one for sequential
//! recommendation benchmarks: drop users and items with fewer than five
//! interactions (iterated to a fixpoint), sort each user's events
//! chronologically, and hold out the last two events per user for test and
//! validation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One (user, item, timestamp) interaction as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

/// An item interaction inside a user's sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub item_id: String,
    pub timestamp: i64,
}

/// Per-user chronologically sorted interaction sequences.
///
/// Timestamp ties keep input order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InteractionLog {
    users: BTreeMap<String, Vec<Interaction>>,
}

impl InteractionLog {
    /// Build a log from events in input order, sorting each user stably by
    /// timestamp and rejecting duplicate triples.
    pub fn from_events(events: impl IntoIterator<Item = Event>) -> Result<Self> {
        let mut seen: HashSet<(String, String, i64)> = HashSet::new();
        let mut users: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
        for ev in events {
            if !seen.insert((ev.user_id.clone(), ev.item_id.clone(), ev.timestamp)) {
                return Err(Error::DuplicateEvent {
                    user_id: ev.user_id,
                    item_id: ev.item_id,
                    timestamp: ev.timestamp,
                });
            }
            users.entry(ev.user_id).or_default().push(Interaction {
                item_id: ev.item_id,
                timestamp: ev.timestamp,
            });
        }
        for seq in users.values_mut() {
            seq.sort_by_key(|it| it.timestamp);
        }
        Ok(Self { users })
    }

    pub fn from_sequences(users: BTreeMap<String, Vec<Interaction>>) -> Self {
        Self { users }
    }

    pub fn users(&self) -> &BTreeMap<String, Vec<Interaction>> {
        &self.users
    }

    pub fn sequence(&self, user_id: &str) -> Option<&[Interaction]> {
        self.users.get(user_id).map(Vec::as_slice)
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_events(&self) -> usize {
        self.users.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// Distinct item ids, sorted.
    pub fn items(&self) -> BTreeSet<String> {
        self.users
            .values()
            .flatten()
            .map(|it| it.item_id.clone())
            .collect()
    }

    /// Per-item interaction counts.
    pub fn item_counts(&self) -> HashMap<&str, usize> {
        let mut counts = HashMap::new();
        for it in self.users.values().flatten() {
            *counts.entry(it.item_id.as_str()).or_insert(0) += 1;
        }
        counts
    }

    /// Events flattened user-major, in sequence order.
    pub fn events(&self) -> impl Iterator<Item = Event> + '_ {
        self.users.iter().flat_map(|(user, seq)| {
            seq.iter().map(move |it| Event {
                user_id: user.clone(),
                item_id: it.item_id.clone(),
                timestamp: it.timestamp,
            })
        })
    }
}

/// Read a whole JSON-lines file.
pub fn load_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file), path)
}

/// Load a JSON-lines interaction file.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<InteractionLog> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let events = read_jsonl::<Event, _>(BufReader::new(file), path)?;
    if events.is_empty() {
        return Err(Error::Empty(format!("no interactions in {}", path.display())));
    }
    InteractionLog::from_events(events)
}

/// Parse JSON-lines from a reader, skipping blank lines. `path` is only
/// used in error messages.
pub fn read_jsonl<T, R>(reader: R, path: &Path) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    R: BufRead,
{
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T, I>(path: &Path, rows: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Repeatedly drop users and items with fewer than `min` events until no
/// more removals happen.
pub fn filter_min_count(log: &InteractionLog, min: usize) -> InteractionLog {
    let mut users = log.users.clone();
    loop {
        let mut item_counts: HashMap<String, usize> = HashMap::new();
        for it in users.values().flatten() {
            *item_counts.entry(it.item_id.clone()).or_insert(0) += 1;
        }
        let mut changed = false;
        for seq in users.values_mut() {
            let before = seq.len();
            seq.retain(|it| item_counts[&it.item_id] >= min);
            changed |= seq.len() != before;
        }
        let before = users.len();
        users.retain(|_, seq| seq.len() >= min);
        changed |= users.len() != before;
        if !changed {
            break;
        }
    }
    InteractionLog { users }
}

/// Leave-one-out split: last event is test, second-to-last is validation,
/// the rest is training history.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSet {
    pub train: BTreeMap<String, Vec<Interaction>>,
    pub valid: BTreeMap<String, Interaction>,
    pub test: BTreeMap<String, Interaction>,
}

impl SplitSet {
    pub fn train_log(&self) -> InteractionLog {
        InteractionLog::from_sequences(self.train.clone())
    }

    /// Training history plus the validation event, i.e. everything visible
    /// when predicting the test event.
    pub fn test_history(&self, user_id: &str) -> Option<Vec<Interaction>> {
        let mut seq = self.train.get(user_id)?.clone();
        seq.push(self.valid.get(user_id)?.clone());
        Some(seq)
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let train: Vec<Event> = self.train_log().events().collect();
        write_jsonl(&dir.join("train.jsonl"), &train)?;
        let held = |m: &BTreeMap<String, Interaction>| -> Vec<Event> {
            m.iter()
                .map(|(u, it)| Event {
                    user_id: u.clone(),
                    item_id: it.item_id.clone(),
                    timestamp: it.timestamp,
                })
                .collect()
        };
        write_jsonl(&dir.join("valid.jsonl"), &held(&self.valid))?;
        write_jsonl(&dir.join("test.jsonl"), &held(&self.test))
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let load = |name: &str| -> Result<Vec<Event>> {
            let path = dir.join(name);
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            read_jsonl(BufReader::new(file), &path)
        };
        let train = InteractionLog::from_events(load("train.jsonl")?)?.users;
        let held = |events: Vec<Event>| -> BTreeMap<String, Interaction> {
            events
                .into_iter()
                .map(|e| {
                    (
                        e.user_id,
                        Interaction {
                            item_id: e.item_id,
                            timestamp: e.timestamp,
                        },
                    )
                })
                .collect()
        };
        Ok(Self {
            train,
            valid: held(load("valid.jsonl")?),
            test: held(load("test.jsonl")?),
        })
    }
}

pub fn leave_one_out_split(log: &InteractionLog) -> Result<SplitSet> {
    let mut split = SplitSet {
        train: BTreeMap::new(),
        valid: BTreeMap::new(),
        test: BTreeMap::new(),
    };
    for (user, seq) in &log.users {
        if seq.len() < 3 {
            return Err(Error::TooFewEvents {
                user_id: user.clone(),
                count: seq.len(),
                required: 3,
            });
        }
        let n = seq.len();
        split.train.insert(user.clone(), seq[..n - 2].to_vec());
        split.valid.insert(user.clone(), seq[n - 2].clone());
        split.test.insert(user.clone(), seq[n - 1].clone());
    }
    Ok(split)
}

/// Item metadata: title and root-first category path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item_id: String,
    pub title: String,
    #[serde(default)]
    pub categories: Vec<String>,
}

impl ItemMeta {
    /// Category path rendered as `Root > Level1 > ...`.
    pub fn category_path(&self) -> String {
        self.categories.join(" > ")
    }
}

pub fn load_metadata(path: impl AsRef<Path>) -> Result<BTreeMap<String, ItemMeta>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let rows: Vec<ItemMeta> = read_jsonl(BufReader::new(file), path)?;
    let mut out = BTreeMap::new();
    for (idx, meta) in rows.into_iter().enumerate() {
        if meta.categories.iter().any(|c| c.trim().is_empty()) {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("empty category level for item {}", meta.item_id),
            });
        }
        out.insert(meta.item_id.clone(), meta);
    }
    Ok(out)
}

pub fn write_metadata(path: impl AsRef<Path>, meta: &BTreeMap<String, ItemMeta>) -> Result<()> {
    write_jsonl(path.as_ref(), meta.values())
}

/// Symmetric, irreflexive co-engagement relation over items.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoEngagementSet {
    positives: BTreeMap<String, BTreeSet<String>>,
    items: BTreeSet<String>,
}

impl CoEngagementSet {
    /// Build from an explicit pair list, enforcing symmetry and dropping
    /// self-pairs. `items` is the universe for negative sampling; pair
    /// endpoints are added to it.
    pub fn from_pairs<'a>(
        items: impl IntoIterator<Item = String>,
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Self {
        let mut set = Self {
            positives: BTreeMap::new(),
            items: items.into_iter().collect(),
        };
        for (a, b) in pairs {
            set.insert(a, b);
        }
        set
    }

    fn insert(&mut self, a: &str, b: &str) {
        self.items.insert(a.to_owned());
        self.items.insert(b.to_owned());
        if a == b {
            return;
        }
        self.positives
            .entry(a.to_owned())
            .or_default()
            .insert(b.to_owned());
        self.positives
            .entry(b.to_owned())
            .or_default()
            .insert(a.to_owned());
    }

    pub fn positives(&self, item: &str) -> Option<&BTreeSet<String>> {
        self.positives.get(item)
    }

    /// Items with at least one positive, sorted.
    pub fn anchors(&self) -> impl Iterator<Item = &str> {
        self.positives
            .iter()
            .filter(|(_, p)| !p.is_empty())
            .map(|(k, _)| k.as_str())
    }

    pub fn items(&self) -> &BTreeSet<String> {
        &self.items
    }

    pub fn num_pairs(&self) -> usize {
        self.positives.values().map(BTreeSet::len).sum::<usize>() / 2
    }

    /// All items not in `P(item) ∪ {item}`, sorted.
    pub fn negative_pool(&self, item: &str) -> Vec<&str> {
        let pos = self.positives.get(item);
        self.items
            .iter()
            .filter(|c| c.as_str() != item && !pos.is_some_and(|p| p.contains(c.as_str())))
            .map(String::as_str)
            .collect()
    }

    /// Sample up to `count` negatives uniformly without replacement.
    pub fn sample_negatives<R: Rng + ?Sized>(
        &self,
        item: &str,
        count: usize,
        rng: &mut R,
    ) -> Vec<&str> {
        let pool = self.negative_pool(item);
        let amount = count.min(pool.len());
        index::sample(rng, pool.len(), amount)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    }
}

/// Options for [`co_engagement_pairs`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CoEngagementOptions {
    /// Only pair events at most `window` positions apart. `None` pairs every
    /// two items in the same user's history.
    pub window: Option<usize>,
}

/// Items co-occurring in at least one user's sequence are positives of each
/// other. Callers pass the training split so held-out events never leak in.
pub fn co_engagement_pairs(log: &InteractionLog, opts: CoEngagementOptions) -> CoEngagementSet {
    let mut set = CoEngagementSet {
        positives: BTreeMap::new(),
        items: log.items(),
    };
    for seq in log.users.values() {
        for (i, a) in seq.iter().enumerate() {
            let end = match opts.window {
                Some(w) => (i + w + 1).min(seq.len()),
                None => seq.len(),
            };
            for b in &seq[i + 1..end] {
                set.insert(&a.item_id, &b.item_id);
            }
        }
    }
    set
}
