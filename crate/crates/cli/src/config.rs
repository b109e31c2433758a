//! Run configuration: a TOML file with one table per module, merged with
//! `--set path=value` overrides.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use semrank_core::promptgen::ChatClientConfig;
use semrank_core::seed;
use semrank_core::synth::{CorpusSpec, MixtureSpec};
use semrank_core::{
    ContrastiveConfig, MockPolicyConfig, PromptConfig, RewardConfig, Strategy, TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    /// Users and items with fewer events are removed, repeatedly.
    pub min_count: usize,
    /// Co-engagement window in sequence positions; absent pairs whole
    /// histories.
    pub co_engagement_window: Option<usize>,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            min_count: 5,
            co_engagement_window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// Use the offline mock teacher instead of the HTTP client.
    pub mock: bool,
    pub strategy: Strategy,
    pub max_attempts: usize,
    pub seed: u64,
    pub client: ChatClientConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            mock: false,
            strategy: Strategy::Rejection,
            max_attempts: semrank_core::promptgen::DEFAULT_MAX_ATTEMPTS,
            seed: 0,
            client: ChatClientConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_candidates: usize,
    pub ks: Vec<usize>,
    /// Popularity back-off weight of the Markov retriever.
    pub smoothing: f64,
    pub method: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_candidates: 10,
            ks: vec![1, 5, 9, 10],
            smoothing: 1.0,
            method: "reranker".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    /// Rows of the 32-row grid to run, in table order; empty runs all.
    pub rows: Vec<usize>,
    /// Co-engagement partners per item for the synthetic mixture.
    pub pairs_per_item: usize,
    pub contrastive: ContrastiveConfig,
    pub mixture: MixtureSpec,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            rows: Vec::new(),
            pairs_per_item: 3,
            contrastive: ContrastiveConfig {
                epochs: 2,
                ..Default::default()
            },
            mixture: MixtureSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed. Module seeds left unset are derived from it.
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub ingest: IngestConfig,
    pub contrastive: ContrastiveConfig,
    pub codebook: TrainConfig,
    pub prompt: PromptConfig,
    pub teacher: TeacherConfig,
    pub reward: RewardConfig,
    pub eval: EvalConfig,
    pub ablate: AblateSection,
    pub mock_policy: MockPolicyConfig,
    pub synth: CorpusSpec,
}

/// Module tables whose `seed` is derived from the root seed when unset.
const SEEDED: [&str; 5] = ["contrastive", "codebook", "teacher", "mock_policy", "synth"];

/// TOML integers are signed, so derived seeds keep 63 bits.
fn module_seed(root: u64, label: &str) -> i64 {
    (seed::derive(root, label) & i64::MAX as u64) as i64
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(table: &mut Table, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("invalid override path {path:?}");
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => bail!("override path {path:?} crosses non-table key {part:?}"),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Read the optional config file, apply overrides, and fill derived
    /// module seeds.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Table::new(),
        };
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .with_context(|| format!("override {o:?} is not of the form path=value"))?;
            set_path(&mut table, path.trim(), parse_value(raw.trim()))?;
        }
        let root = match table.get("seed") {
            Some(v) => v
                .as_integer()
                .filter(|s| *s >= 0)
                .context("seed must be a non-negative integer")? as u64,
            None => 0,
        };
        for module in SEEDED {
            let entry = table
                .entry(module.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            if let Value::Table(t) = entry {
                t.entry("seed".to_string())
                    .or_insert_with(|| Value::Integer(module_seed(root, module)));
            }
        }
        let cfg: RunConfig = Value::Table(table).try_into().context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.contrastive.validate()?;
        self.codebook.validate()?;
        self.reward.validate()?;
        self.teacher.client.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            bail!("eval.ks must be a non-empty list of positive integers");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Write `<dir>/<command>.resolved.toml`.
    pub fn snapshot(&self, dir: &Path, command: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{command}.resolved.toml"));
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        log::debug!("wrote {}", path.display());
        Ok(())
    }
}
