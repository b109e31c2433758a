//! Semantic IDs: assignment, token rendering, inverse lookup, uniqueness.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;
use std::sync::LazyLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingStore;
use crate::error::{Error, Result};
use crate::rqcodec::{quantize, CodebookStack};
use crate::seed;

pub const SID_BEGIN: &str = "<|sid_begin|>";
pub const SID_END: &str = "<|sid_end|>";
const LEVEL_LETTERS: &[u8; 26] = b"abcdefghijklmnopqrstuvwxyz";

/// Ordered code indices, one per quantization level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SemanticId(pub Vec<u32>);

impl SemanticId {
    pub fn codes(&self) -> &[u32] {
        &self.0
    }

    pub fn levels(&self) -> usize {
        self.0.len()
    }

    /// `<|sid_begin|><s_a_{z1}><s_b_{z2}>...<|sid_end|>`; the raw index is
    /// used as the payload.
    pub fn render(&self) -> Result<String> {
        render(self)
    }
}

impl From<Vec<usize>> for SemanticId {
    fn from(codes: Vec<usize>) -> Self {
        Self(codes.into_iter().map(|c| c as u32).collect())
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match render(self) {
            Ok(s) => f.write_str(&s),
            Err(_) => write!(f, "{:?}", self.0),
        }
    }
}

pub fn render(sid: &SemanticId) -> Result<String> {
    if sid.0.len() > LEVEL_LETTERS.len() {
        return Err(Error::Format(format!(
            "cannot render {} levels; at most 26 level letters exist",
            sid.0.len()
        )));
    }
    let mut out = String::from(SID_BEGIN);
    for (letter, code) in LEVEL_LETTERS.iter().zip(&sid.0) {
        out.push_str(&format!("<s_{}_{}>", *letter as char, code));
    }
    out.push_str(SID_END);
    Ok(out)
}

static LEVEL_TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^<s_([a-z])_(\d+)>").expect("valid regex"));

/// Parse a rendered SID. Surrounding whitespace and whitespace between
/// tokens is tolerated; levels must appear as `a, b, c, ...` in order.
pub fn parse_sid(text: &str) -> Result<SemanticId> {
    let err = |m: String| Error::Format(format!("semantic id {text:?}: {m}"));
    let text = text.trim();
    if text.matches(SID_BEGIN).count() != 1 || text.matches(SID_END).count() != 1 {
        return Err(err("expected exactly one begin and one end marker".into()));
    }
    let body = text
        .strip_prefix(SID_BEGIN)
        .and_then(|t| t.strip_suffix(SID_END))
        .ok_or_else(|| err("markers must enclose the whole text".into()))?;
    let mut rest = body.trim_start();
    let mut codes = Vec::new();
    while !rest.is_empty() {
        let caps = LEVEL_TOKEN
            .captures(rest)
            .ok_or_else(|| err(format!("unexpected text {rest:?}")))?;
        let letter = caps[1].as_bytes()[0];
        let expected = LEVEL_LETTERS[codes.len().min(25)];
        if codes.len() >= 26 || letter != expected {
            return Err(err(format!(
                "level letter {:?} out of order, expected {:?}",
                letter as char, expected as char
            )));
        }
        let code: u32 = caps[2]
            .parse()
            .map_err(|_| err(format!("index {:?} is not a 32-bit integer", &caps[2])))?;
        codes.push(code);
        rest = rest[caps[0].len()..].trim_start();
    }
    if codes.is_empty() {
        return Err(err("no level tokens".into()));
    }
    Ok(SemanticId(codes))
}

/// Forward and inverse maps between items and semantic IDs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SidRegistry {
    forward: BTreeMap<String, SemanticId>,
    inverse: BTreeMap<SemanticId, BTreeSet<String>>,
}

impl SidRegistry {
    pub fn from_assignments(pairs: impl IntoIterator<Item = (String, SemanticId)>) -> Self {
        let mut reg = Self::default();
        for (item, sid) in pairs {
            reg.insert(item, sid);
        }
        reg
    }

    fn insert(&mut self, item: String, sid: SemanticId) {
        if let Some(old) = self.forward.insert(item.clone(), sid.clone()) {
            if let Some(bucket) = self.inverse.get_mut(&old) {
                bucket.remove(&item);
                if bucket.is_empty() {
                    self.inverse.remove(&old);
                }
            }
        }
        self.inverse.entry(sid).or_default().insert(item);
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn sid(&self, item: &str) -> Option<&SemanticId> {
        self.forward.get(item)
    }

    /// Items mapped to `sid`, ordered by item id.
    pub fn items(&self, sid: &SemanticId) -> Option<&BTreeSet<String>> {
        self.inverse.get(sid)
    }

    pub fn forward(&self) -> &BTreeMap<String, SemanticId> {
        &self.forward
    }

    pub fn inverse(&self) -> &BTreeMap<SemanticId, BTreeSet<String>> {
        &self.inverse
    }

    /// Items sharing their SID with at least one other item.
    pub fn colliding_items(&self) -> usize {
        self.inverse
            .values()
            .filter(|b| b.len() > 1)
            .map(BTreeSet::len)
            .sum()
    }

    pub fn collision_rate(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Empty("collision rate of an empty registry".into()));
        }
        Ok(self.colliding_items() as f64 / self.len() as f64)
    }

    pub fn uniqueness_rate(&self) -> Result<f64> {
        self.collision_rate().map(|c| 1.0 - c)
    }

    pub fn report(&self) -> Result<UniquenessReport> {
        let colliding = self.colliding_items();
        Ok(UniquenessReport {
            total: self.len(),
            unique: self.len() - colliding,
            colliding,
            uniqueness_rate: self.uniqueness_rate()?,
        })
    }

    /// JSON-lines rows `{item_id, sid, sid_text}` ordered by item id.
    pub fn export_rows(&self) -> Result<Vec<RegistryRow>> {
        self.forward
            .iter()
            .map(|(item, sid)| {
                Ok(RegistryRow {
                    item_id: item.clone(),
                    sid: sid.0.clone(),
                    sid_text: render(sid)?,
                })
            })
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::corpus::write_jsonl(path.as_ref(), &self.export_rows()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let rows: Vec<RegistryRow> = crate::corpus::read_jsonl(BufReader::new(file), path)?;
        let mut pairs = Vec::with_capacity(rows.len());
        for (idx, row) in rows.into_iter().enumerate() {
            let sid = SemanticId(row.sid);
            if parse_sid(&row.sid_text)? != sid {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("sid_text disagrees with sid for {}", row.item_id),
                });
            }
            pairs.push((row.item_id, sid));
        }
        Ok(Self::from_assignments(pairs))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryRow {
    pub item_id: String,
    pub sid: Vec<u32>,
    pub sid_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub total: usize,
    pub unique: usize,
    pub colliding: usize,
    pub uniqueness_rate: f64,
}

/// Tokenize every item in `store`. The last `random_last` levels are drawn
/// from a per-item generator seeded with `seed ^ hash(item_id)`, so the
/// assignment is reproducible.
pub fn build_registry(
    store: &EmbeddingStore,
    stack: &CodebookStack,
    random_last: usize,
    seed: u64,
) -> Result<SidRegistry> {
    if store.dim() != stack.dim() {
        return Err(Error::DimensionMismatch {
            expected: stack.dim(),
            actual: store.dim(),
        });
    }
    let pairs: Vec<(String, SemanticId)> = store
        .ids()
        .par_iter()
        .map(|id| {
            let mut rng = seed::rng(seed::item_seed(seed, id));
            let q = quantize(store.vector(id)?, stack, random_last, &mut rng)?;
            Ok((id.clone(), SemanticId::from(q.codes)))
        })
        .collect::<Result<_>>()?;
    Ok(SidRegistry::from_assignments(pairs))
}
