//! Chat-format training samples, teacher prompts for reasoning-trace
//! generation, and the drivers that query a teacher model.

mod client;
mod driver;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use client::{ChatClientConfig, ChatCompletion, HttpChatClient, MockTeacher, ScriptedClient};
pub use driver::{
    generate_traces, run_rejection, run_targeted, ExhaustionReport, RejectionOutcome, TraceOutcome,
    DEFAULT_MAX_ATTEMPTS,
};

use crate::corpus::ItemMeta;
use crate::error::{Error, Result};
use crate::parse::render_output;
use crate::sid::{render, SidRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Targeted,
    Rejection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub strategy: Strategy,
    pub knowledge_priming: bool,
    pub attempts: usize,
    pub episode_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatSample {
    pub messages: Vec<ChatMessage>,
    pub provenance: Provenance,
}

impl ChatSample {
    pub fn assistant(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::Assistant)
            .map(|m| m.content.as_str())
    }

    pub fn save_all<'a>(path: &Path, samples: impl IntoIterator<Item = &'a ChatSample>) -> Result<()> {
        crate::corpus::write_jsonl(path, samples)
    }

    pub fn load_all(path: &Path) -> Result<Vec<ChatSample>> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        crate::corpus::read_jsonl(std::io::BufReader::new(file), path)
    }
}

/// One re-ranking problem: a user history and a pre-ranked candidate list
/// that contains the ground-truth next item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankEpisode {
    pub episode_id: String,
    /// Oldest first.
    pub history: Vec<String>,
    /// Pre-ranked order.
    pub candidates: Vec<String>,
    pub target: String,
    /// 1-based rank of the target in `candidates`.
    pub pre_rank_position: usize,
}

impl RerankEpisode {
    pub fn new(
        episode_id: impl Into<String>,
        history: Vec<String>,
        candidates: Vec<String>,
        target: impl Into<String>,
    ) -> Result<Self> {
        let target = target.into();
        let pos = candidates
            .iter()
            .position(|c| *c == target)
            .ok_or_else(|| Error::Domain(format!("target {target} is not among the candidates")))?;
        let ep = Self {
            episode_id: episode_id.into(),
            history,
            candidates,
            target,
            pre_rank_position: pos + 1,
        };
        ep.validate()?;
        Ok(ep)
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() < 2 {
            return Err(Error::Domain(format!(
                "episode {} has {} candidates; at least 2 are required",
                self.episode_id,
                self.candidates.len()
            )));
        }
        let distinct: BTreeSet<&String> = self.candidates.iter().collect();
        if distinct.len() != self.candidates.len() {
            return Err(Error::Domain(format!(
                "episode {} has duplicate candidates",
                self.episode_id
            )));
        }
        let pos = self.pre_rank_position;
        if pos < 1 || pos > self.candidates.len() || self.candidates[pos - 1] != self.target {
            return Err(Error::Domain(format!(
                "episode {}: pre_rank_position {pos} does not point at target {}",
                self.episode_id, self.target
            )));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.candidates.len()
    }

    /// Recommendation order used for supervision: target first, the rest in
    /// pre-ranked order (0-based candidate indices).
    pub fn target_first_ranking(&self) -> Vec<usize> {
        let t = self.pre_rank_position - 1;
        std::iter::once(t)
            .chain((0..self.n()).filter(|&i| i != t))
            .collect()
    }

    pub fn save_all(path: &Path, episodes: &[RerankEpisode]) -> Result<()> {
        crate::corpus::write_jsonl(path, episodes)
    }

    pub fn load_all(path: &Path) -> Result<Vec<RerankEpisode>> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let eps: Vec<RerankEpisode> = crate::corpus::read_jsonl(std::io::BufReader::new(file), path)?;
        for (i, ep) in eps.iter().enumerate() {
            ep.validate().map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(eps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    /// Include the category hierarchy block (knowledge priming).
    pub with_category_hierarchy: bool,
    /// Most recent history items shown in prompts.
    pub max_history: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            with_category_hierarchy: true,
            max_history: 10,
        }
    }
}

/// Item lookups shared by all prompt builders.
#[derive(Debug, Clone)]
pub struct PromptContext<'a> {
    registry: &'a SidRegistry,
    meta: &'a BTreeMap<String, ItemMeta>,
    hierarchy: String,
}

const LEVEL_NAMES: [&str; 6] = ["Root", "Main", "Sub", "Product Type", "Specific", "Variant"];
const HIERARCHY_NAMES_PER_LEVEL: usize = 8;

impl<'a> PromptContext<'a> {
    pub fn new(registry: &'a SidRegistry, meta: &'a BTreeMap<String, ItemMeta>) -> Self {
        let hierarchy = category_hierarchy(meta.values());
        Self {
            registry,
            meta,
            hierarchy,
        }
    }

    fn item(&self, id: &str) -> Result<(String, &'a ItemMeta)> {
        let sid = self
            .registry
            .sid(id)
            .ok_or_else(|| Error::UnknownItem(format!("{id} has no semantic id")))?;
        let meta = self
            .meta
            .get(id)
            .ok_or_else(|| Error::UnknownItem(format!("{id} has no metadata")))?;
        Ok((render(sid)?, meta))
    }

    pub fn hierarchy(&self) -> &str {
        &self.hierarchy
    }
}

/// Category names per depth, listing at most a few names per level.
pub fn category_hierarchy<'m>(items: impl IntoIterator<Item = &'m ItemMeta>) -> String {
    let mut levels: Vec<BTreeSet<&str>> = Vec::new();
    for m in items {
        for (depth, name) in m.categories.iter().enumerate() {
            if levels.len() <= depth {
                levels.resize_with(depth + 1, BTreeSet::new);
            }
            levels[depth].insert(name);
        }
    }
    let mut out =
        String::from("Categories are structured in a hierarchy. Format: 'Level0 > Level1 > Level2 > ...'\n");
    for (depth, names) in levels.iter().enumerate() {
        let label = LEVEL_NAMES
            .get(depth)
            .map(|l| format!("Level {depth} ({l})"))
            .unwrap_or_else(|| format!("Level {depth}"));
        let mut shown: Vec<&str> = names.iter().take(HIERARCHY_NAMES_PER_LEVEL).copied().collect();
        if names.len() > HIERARCHY_NAMES_PER_LEVEL {
            shown.push("...");
        }
        let _ = writeln!(out, "{label}: {}", shown.join(", "));
    }
    out
}

fn recent(history: &[String], max: usize) -> &[String] {
    &history[history.len().saturating_sub(max)..]
}

/// The three-message training sample. The assistant message is a JSON
/// object holding `trace` as the explanation and the target-first ranking.
pub fn build_chat_sample(
    episode: &RerankEpisode,
    trace: &str,
    ctx: &PromptContext<'_>,
    cfg: &PromptConfig,
    provenance: Provenance,
) -> Result<ChatSample> {
    episode.validate()?;
    let system = format!(
        "You are a professional e-commerce recommendation expert specializing in sequential \
         purchase prediction. YOUR TASK: Predict which item the user is MOST LIKELY TO PURCHASE \
         NEXT by re-ranking {} pre-ranked candidates from a generative retrieval model.",
        episode.n()
    );
    let mut user = String::new();
    if cfg.with_category_hierarchy {
        let _ = writeln!(user, "{}", ctx.hierarchy);
    }
    user.push_str("The user has purchased the following items:\n");
    for id in recent(&episode.history, cfg.max_history) {
        let (sid, meta) = ctx.item(id)?;
        let _ = writeln!(
            user,
            "{sid}, title: \"{}\", categories: \"{}\";",
            meta.title,
            meta.category_path()
        );
    }
    user.push_str("\nPlease re-rank the following candidates:\n");
    for (i, id) in episode.candidates.iter().enumerate() {
        let (sid, meta) = ctx.item(id)?;
        let _ = writeln!(
            user,
            "Candidate {}: {sid}, title: \"{}\", categories: \"{}\"",
            i + 1,
            meta.title,
            meta.category_path()
        );
    }
    let assistant = render_output(Some(trace.trim()), &episode.target_first_ranking());
    Ok(ChatSample {
        messages: vec![
            ChatMessage::new(Role::System, system),
            ChatMessage::new(Role::User, user.trim_end()),
            ChatMessage::new(Role::Assistant, assistant),
        ],
        provenance,
    })
}

fn prompt_head(out: &mut String, system: &str, episode: &RerankEpisode, ctx: &PromptContext<'_>, cfg: &PromptConfig) -> Result<()> {
    let _ = writeln!(out, "# System Role\n{system}\n");
    if cfg.with_category_hierarchy {
        let _ = writeln!(out, "# Available Category Hierarchy\n{}", ctx.hierarchy);
    }
    out.push_str("# User Purchase History\nThe user recently purchased the following items:\n\n");
    for (i, id) in recent(&episode.history, cfg.max_history).iter().enumerate() {
        let (sid, meta) = ctx.item(id)?;
        let _ = writeln!(
            out,
            "Item {}\nItem SID: {sid}\nTitle: {}\nCategories: {}\n",
            i + 1,
            meta.title,
            meta.category_path()
        );
    }
    out.push_str("# Candidate Items\n\n");
    for (i, id) in episode.candidates.iter().enumerate() {
        let (_, meta) = ctx.item(id)?;
        let _ = writeln!(
            out,
            "Candidate {}: {}\nCategories: {}\n",
            i + 1,
            meta.title,
            meta.category_path()
        );
    }
    Ok(())
}

const SYSTEM_ROLE: &str = "You are an expert at analyzing e-commerce purchase patterns and predicting user \
preferences. Given the user's purchase history (with SID identifiers) and a list of candidate items, you need \
to predict which candidate is MOST LIKELY to be the user's next purchase.";

const EXAMPLE_FORMAT: &str = "# Example Output Format\n\
Step 1 Reasoning: \"Looking at the purchase history, <|sid_begin|>...<|sid_end|> and <|sid_begin|>...<|sid_end|> share a category, indicating where the user focuses.\"\n\
Step 1 Category: \"Level0 > Level1\"\n\
Step 2 Reasoning: \"The recent purchases of <|sid_begin|>...<|sid_end|> suggest the user is building a routine around ...\"\n\
Step 2 Category: \"Level0 > Level1 > Level2\"\n\
Step 3 Reasoning: \"Based on their pattern, Candidate N would naturally complement their existing items.\"\n\
Step 3 Category: \"Level0 > Level1 > Level2\"\n\
Prediction: Candidate N\n\n";

const RESPONSE_RULES: &str = "- Step 1 Reasoning (free-form analysis citing items by SID) + Step 1 Category (broad)\n\
- Step 2 Reasoning (narrowing down, citing specific items by SID) + Step 2 Category (more specific)\n\
- Step 3 Reasoning (final prediction explanation) + Step 3 Category (final specific)\n";

/// Teacher prompt that discloses the correct candidate and asks for a
/// rationale.
pub fn build_targeted_prompt(
    episode: &RerankEpisode,
    ctx: &PromptContext<'_>,
    cfg: &PromptConfig,
) -> Result<String> {
    let mut out = String::new();
    prompt_head(
        &mut out,
        SYSTEM_ROLE,
        episode,
        ctx,
        cfg,
    )?;
    let (_, target_meta) = ctx.item(&episode.target)?;
    let _ = writeln!(
        out,
        "# Task\nThe correct answer is Candidate {} ({}).\n\
         Generate a step-by-step reasoning trace explaining why this candidate is the best match.\n\n\
         Critical Guidelines:\n\
         1. Cite items by SID: When referring to purchase history, use their SID directly\n\
         2. Focus on analyzing patterns in the user's purchase history\n\
         3. Do NOT use phrases like \"target item\" or \"the target\"\n\
         4. Each step: Reasoning line (with SID citations) + Category line\n",
        episode.pre_rank_position, target_meta.title
    );
    out.push_str(EXAMPLE_FORMAT);
    let _ = write!(
        out,
        "# Your Response\nGenerate your response following the EXACT format above with all required lines:\n\
         {RESPONSE_RULES}- Prediction: Candidate {}\n",
        episode.pre_rank_position
    );
    Ok(out)
}

/// Teacher prompt that withholds the target and asks for a prediction.
pub fn build_rejection_prompt(
    episode: &RerankEpisode,
    ctx: &PromptContext<'_>,
    cfg: &PromptConfig,
) -> Result<String> {
    let mut out = String::new();
    prompt_head(
        &mut out,
        SYSTEM_ROLE,
        episode,
        ctx,
        cfg,
    )?;
    out.push_str(
        "# Task\nAnalyze the user's purchase history and predict which candidate they are most likely to purchase next.\n\n\
         Critical Guidelines:\n\
         1. Cite items by SID: When referring to items in the purchase history, cite them directly using their SID.\n\
         2. Focus on analyzing patterns in the user's purchase history\n\
         3. Each step should have both a Reasoning line (free-form with SID citations) AND a Category line\n\n",
    );
    out.push_str(EXAMPLE_FORMAT);
    let _ = write!(
        out,
        "# Your Response\nGenerate your response following the EXACT format above. You MUST include:\n\
         {RESPONSE_RULES}- Prediction: Candidate <number>\nReasoning:\n"
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse::parse_output;
    use crate::sid::SemanticId;

    pub(super) fn fixture() -> (SidRegistry, BTreeMap<String, ItemMeta>, RerankEpisode) {
        let ids: Vec<String> = (0..12).map(|i| format!("i{i}")).collect();
        let reg = SidRegistry::from_assignments(
            ids.iter()
                .enumerate()
                .map(|(k, id)| (id.clone(), SemanticId(vec![k as u32, 7]))),
        );
        let meta = ids
            .iter()
            .enumerate()
            .map(|(k, id)| {
                (
                    id.clone(),
                    ItemMeta {
                        item_id: id.clone(),
                        title: format!("Item number {k}"),
                        categories: vec!["Beauty".into(), if k % 2 == 0 { "Hair Care" } else { "Skin Care" }.into()],
                    },
                )
            })
            .collect();
        let ep = RerankEpisode::new("u1", ids[..2].to_vec(), ids[2..].to_vec(), "i4").unwrap();
        (reg, meta, ep)
    }

    fn prov() -> Provenance {
        Provenance {
            strategy: Strategy::Targeted,
            knowledge_priming: false,
            attempts: 1,
            episode_id: "u1".into(),
        }
    }

    #[test]
    fn sample_counts_sids() {
        let (reg, meta, ep) = fixture();
        let ctx = PromptContext::new(&reg, &meta);
        let cfg = PromptConfig {
            with_category_hierarchy: false,
            ..Default::default()
        };
        let s = build_chat_sample(&ep, "because", &ctx, &cfg, prov()).unwrap();
        assert_eq!(s.messages[1].content.matches("<|sid_begin|>").count(), 12);
        let roles: Vec<Role> = s.messages.iter().map(|m| m.role).collect();
        assert_eq!(roles, vec![Role::System, Role::User, Role::Assistant]);
        let parsed = parse_output(s.assistant().unwrap(), ep.n());
        assert_eq!(parsed.ranking.unwrap(), vec![2, 0, 1, 3, 4, 5, 6, 7, 8, 9]);
        assert_eq!(parsed.reasoning.as_deref(), Some("because"));
    }

    #[test]
    fn missing_item_is_named() {
        let (reg, mut meta, ep) = fixture();
        meta.remove("i5");
        let ctx = PromptContext::new(&reg, &meta);
        let err = build_chat_sample(&ep, "t", &ctx, &PromptConfig::default(), prov()).unwrap_err();
        assert!(err.to_string().contains("i5"));
    }

    #[test]
    fn targeted_discloses_answer() {
        let (reg, meta, ep) = fixture();
        let ctx = PromptContext::new(&reg, &meta);
        let p = build_targeted_prompt(&ep, &ctx, &PromptConfig::default()).unwrap();
        assert!(p.contains("The correct answer is Candidate 3 (Item number 4)."));
        assert!(p.contains("# Available Category Hierarchy"));
        let off = PromptConfig {
            with_category_hierarchy: false,
            ..Default::default()
        };
        let p = build_targeted_prompt(&ep, &ctx, &off).unwrap();
        assert!(!p.contains("Category Hierarchy"));
    }

    #[test]
    fn rejection_withholds_answer() {
        let (reg, meta, ep) = fixture();
        let ctx = PromptContext::new(&reg, &meta);
        let p = build_rejection_prompt(&ep, &ctx, &PromptConfig::default()).unwrap();
        assert!(!p.contains("correct answer"));
        assert!(!p.contains("Prediction: Candidate 3"));
        let mut last = 0;
        for i in 1..=10 {
            let at = p.find(&format!("Candidate {i}: ")).unwrap();
            assert!(at > last);
            last = at;
        }
    }

    #[test]
    fn episode_validation() {
        let ids = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert!(RerankEpisode::new("e", vec![], ids(&["a", "b"]), "c").is_err());
        assert!(RerankEpisode::new("e", vec![], ids(&["a"]), "a").is_err());
        assert!(RerankEpisode::new("e", vec![], ids(&["a", "a"]), "a").is_err());
        let ep = RerankEpisode::new("e", vec![], ids(&["a", "b", "c"]), "c").unwrap();
        assert_eq!(ep.pre_rank_position, 3);
        assert_eq!(ep.target_first_ranking(), vec![2, 0, 1]);
    }

    #[test]
    fn hierarchy_levels() {
        let (_, meta, _) = fixture();
        let h = category_hierarchy(meta.values());
        assert!(h.contains("Level 0 (Root): Beauty\n"));
        assert!(h.contains("Level 1 (Main): Hair Care, Skin Care\n"));
    }
}
