//! Technique ablation over all 32 flag combinations, laid out in three
//! blocks: EMA with dead-code reset, EMA without it, and no EMA.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::CoEngagementSet;
use crate::embed::{refine_embeddings, ContrastiveConfig, EmbeddingStore};
use crate::error::{Error, Result};
use crate::rqcodec::train::{rq_kmeans_init, train_from, TechniqueFlags, TrainConfig};
use crate::rqcodec::CodebookStack;
use crate::sid::build_registry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    EmaBaseline,
    EmaNoReset,
    NoEma,
}

impl Block {
    pub fn title(self) -> &'static str {
        match self {
            Block::EmaBaseline => "Baseline Configurations (EMA Enabled)",
            Block::EmaNoReset => "Without Dead Code Reset (EMA Enabled)",
            Block::NoEma => "Without EMA Update (Codebook Collapse)",
        }
    }

    pub fn of(flags: &TechniqueFlags) -> Self {
        match (flags.ema, flags.dead_code_reset) {
            (true, true) => Block::EmaBaseline,
            (true, false) => Block::EmaNoReset,
            (false, _) => Block::NoEma,
        }
    }
}

fn flags(div: bool, dcr: bool, ema: bool, random: bool, contrastive: bool) -> TechniqueFlags {
    TechniqueFlags {
        ema,
        diversity: div,
        dead_code_reset: dcr,
        random_last: random,
        contrastive_pre: contrastive,
    }
}

/// All 32 combinations in table order.
pub fn grid() -> Vec<(Block, TechniqueFlags)> {
    let bits = [false, true];
    let mut out = Vec::with_capacity(32);
    for dcr in [true, false] {
        for div in bits {
            for random in bits {
                for c in bits {
                    let f = flags(div, dcr, true, random, c);
                    out.push((Block::of(&f), f));
                }
            }
        }
    }
    for (div, dcr) in [(false, true), (false, false), (true, true), (true, false)] {
        for random in bits {
            for c in bits {
                out.push((Block::NoEma, flags(div, dcr, false, random, c)));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub train: TrainConfig,
    /// Used for rows with the contrastive flag.
    pub contrastive: ContrastiveConfig,
    /// Restrict the grid to these rows (by index in table order); empty
    /// means all rows.
    pub rows: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            contrastive: ContrastiveConfig {
                epochs: 2,
                ..Default::default()
            },
            rows: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub index: usize,
    pub block: Block,
    pub flags: TechniqueFlags,
    pub total: usize,
    pub unique: usize,
    pub uniqueness_rate: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Train and tokenize once per selected configuration. The k-means
/// initialization and the contrastive refinement depend only on the
/// contrastive flag, so each is computed at most once.
pub fn run_ablation(
    store: &EmbeddingStore,
    pairs: &CoEngagementSet,
    cfg: &AblationConfig,
) -> Result<AblationReport> {
    cfg.train.validate()?;
    let all = grid();
    let selected: Vec<usize> = if cfg.rows.is_empty() {
        (0..all.len()).collect()
    } else {
        cfg.rows.clone()
    };
    if let Some(bad) = selected.iter().find(|&&i| i >= all.len()) {
        return Err(Error::Config(format!("ablation row {bad} out of range 0..{}", all.len())));
    }

    let mut prepared: HashMap<bool, (EmbeddingStore, CodebookStack)> = HashMap::new();
    let mut rows = Vec::with_capacity(selected.len());
    for index in selected {
        let (block, flags) = all[index];
        let start = Instant::now();
        let (points, init) = match prepared.entry(flags.contrastive_pre) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => {
                let points = if flags.contrastive_pre {
                    refine_embeddings(store, pairs, &cfg.contrastive)?.store
                } else {
                    store.clone()
                };
                let init = rq_kmeans_init(&points, &cfg.train)?;
                e.insert((points, init))
            }
        };
        let (points, init) = (&*points, &*init);
        let train_cfg = TrainConfig {
            flags,
            ..cfg.train.clone()
        };
        let trained = train_from(points.matrix(), init.clone(), &train_cfg)?;
        let registry = build_registry(
            points,
            &trained.stack,
            train_cfg.effective_random_last(),
            train_cfg.seed,
        )?;
        let report = registry.report()?;
        let row = AblationRow {
            index,
            block,
            flags,
            total: report.total,
            unique: report.unique,
            uniqueness_rate: report.uniqueness_rate,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "ablation row {index}: {:?} uniqueness {:.2}% ({:.1}s)",
            flags,
            100.0 * row.uniqueness_rate,
            row.seconds
        );
        rows.push(row);
    }
    Ok(AblationReport { rows })
}

fn mark(on: bool) -> &'static str {
    if on {
        "x"
    } else {
        ""
    }
}

impl AblationReport {
    /// Plain-text table with one section per block.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let header = format!(
            "{:^9} | {:^9} | {:^5} | {:^11} | {:^11} | {:>10}",
            "Diversity", "Dead Code", "EMA", "Random Last", "Contrastive", "Unique (%)"
        );
        let rule = "-".repeat(header.len());
        let _ = writeln!(out, "{header}");
        let mut current = None;
        for r in &self.rows {
            if current != Some(r.block) {
                let _ = writeln!(out, "{rule}\n{}\n{rule}", r.block.title());
                current = Some(r.block);
            }
            let f = &r.flags;
            let _ = writeln!(
                out,
                "{:^9} | {:^9} | {:^5} | {:^11} | {:^11} | {:>10.2}",
                mark(f.diversity),
                mark(f.dead_code_reset),
                mark(f.ema),
                mark(f.random_last),
                mark(f.contrastive_pre),
                100.0 * r.uniqueness_rate
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "block,diversity,dead_code_reset,ema,random_last,contrastive,total,unique,uniqueness_rate\n",
        );
        for r in &self.rows {
            let f = &r.flags;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{:.6}",
                serde_json::to_value(r.block)
                    .ok()
                    .and_then(|v| v.as_str().map(str::to_string))
                    .unwrap_or_default(),
                f.diversity as u8,
                f.dead_code_reset as u8,
                f.ema as u8,
                f.random_last as u8,
                f.contrastive_pre as u8,
                r.total,
                r.unique,
                r.uniqueness_rate
            );
        }
        out
    }
}
