//! Scripted stand-ins for a re-ranking policy, used to drive the scoring
//! and evaluation pipelines without a language model.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::EpisodeOutput;
use crate::parse::render_output;
use crate::promptgen::RerankEpisode;
use crate::reward::{ScoredOutputInput, ScoringInput};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MockPolicyKind {
    /// Move the target to rank 1, keep the rest in pre-ranked order.
    PromoteTarget,
    /// Return the pre-ranked order unchanged.
    Identity,
    /// A uniformly random permutation per sample.
    Shuffle,
    /// Unparseable prose.
    Garbage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockPolicyConfig {
    pub kind: MockPolicyKind,
    /// New token log-probabilities differ from the old ones by a uniform
    /// draw in `[-drift, drift]`. Zero makes every ratio exactly 1.
    pub logprob_drift: f64,
    pub seed: u64,
}

impl Default for MockPolicyConfig {
    fn default() -> Self {
        Self {
            kind: MockPolicyKind::PromoteTarget,
            logprob_drift: 0.0,
            seed: 0,
        }
    }
}

fn ranking_for(kind: MockPolicyKind, ep: &RerankEpisode, rng: &mut impl Rng) -> Option<Vec<usize>> {
    let n = ep.n();
    match kind {
        MockPolicyKind::PromoteTarget => Some(ep.target_first_ranking()),
        MockPolicyKind::Identity => Some((0..n).collect()),
        MockPolicyKind::Shuffle => {
            let mut r: Vec<usize> = (0..n).collect();
            r.shuffle(rng);
            Some(r)
        }
        MockPolicyKind::Garbage => None,
    }
}

fn sample_text(kind: MockPolicyKind, ep: &RerankEpisode, rng: &mut impl Rng) -> String {
    match ranking_for(kind, ep, rng) {
        Some(r) => render_output(
            Some(&format!(
                "The history ends with {}; candidate {} fits best.",
                ep.history.last().map(String::as_str).unwrap_or("nothing"),
                r[0] + 1
            )),
            &r,
        ),
        None => "I am not sure which of these the user would like.".to_string(),
    }
}

/// One output per episode for evaluation, and `group_size` sampled outputs
/// per episode for reward scoring. The first scoring sample is the
/// evaluation output.
pub fn mock_outputs(
    episodes: &[RerankEpisode],
    cfg: &MockPolicyConfig,
    group_size: usize,
) -> Result<(Vec<EpisodeOutput>, Vec<ScoringInput>)> {
    if group_size == 0 {
        return Err(Error::Config("group_size must be at least 1".into()));
    }
    if !(cfg.logprob_drift >= 0.0 && cfg.logprob_drift.is_finite()) {
        return Err(Error::Config("logprob_drift must be finite and >= 0".into()));
    }
    let mut outputs = Vec::with_capacity(episodes.len());
    let mut scoring = Vec::with_capacity(episodes.len());
    for ep in episodes {
        ep.validate()?;
        let mut rng = seed::rng(seed::item_seed(seed::derive(cfg.seed, "mock-policy"), &ep.episode_id));
        let mut samples = Vec::with_capacity(group_size);
        for _ in 0..group_size {
            let text = sample_text(cfg.kind, ep, &mut rng);
            let tokens = text.split_whitespace().count().max(1);
            let old: Vec<f64> = (0..tokens).map(|_| -rng.random_range(0.05..3.0)).collect();
            let new: Vec<f64> = old
                .iter()
                .map(|o| o + cfg.logprob_drift * (rng.random::<f64>() - 0.5) * 2.0)
                .collect();
            samples.push(ScoredOutputInput {
                raw_text: Some(text),
                ranking: None,
                token_logprobs_old: old,
                token_logprobs_new: new,
            });
        }
        outputs.push(EpisodeOutput {
            episode_id: ep.episode_id.clone(),
            raw_text: samples[0].raw_text.clone(),
            ranking: None,
        });
        scoring.push(ScoringInput {
            episode_id: ep.episode_id.clone(),
            pre_rank: ep.pre_rank_position,
            n: ep.n(),
            outputs: samples,
        });
    }
    Ok((outputs, scoring))
}
