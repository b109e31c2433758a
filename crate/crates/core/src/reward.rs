//! Re-ranking rewards, the decoupled SFT loss and the DAPO objective.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parse::{parse_output, ParsedOutput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Weight of the conditional format reward.
    pub alpha: f64,
    pub eps_low: f64,
    pub eps_high: f64,
    pub group_size: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            eps_low: 0.2,
            eps_high: 0.28,
            group_size: 8,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.eps_low > 0.0 && self.eps_high > 0.0 && self.eps_low < 1.0) {
            return Err(Error::Config(format!(
                "clip bounds must satisfy 0 < eps_low < 1 and eps_high > 0, got {} and {}",
                self.eps_low, self.eps_high
            )));
        }
        if self.group_size < 2 {
            return Err(Error::Config(format!(
                "group size must be at least 2, got {}",
                self.group_size
            )));
        }
        Ok(())
    }
}

/// `(pre_rank - re_rank) / n`, ranks 1-based.
pub fn ranking_reward(pre_rank: usize, re_rank: usize, n: usize) -> Result<f64> {
    for (name, r) in [("pre_rank", pre_rank), ("re_rank", re_rank)] {
        if r < 1 || r > n {
            return Err(Error::Domain(format!("{name} {r} is outside [1, {n}]")));
        }
    }
    Ok((pre_rank as f64 - re_rank as f64) / n as f64)
}

/// The format reward is added only when the target was promoted or was
/// already ranked first.
pub fn conditional_reward(r_rank: f64, r_fmt: u8, pre_rank: usize, alpha: f64) -> f64 {
    if r_rank > 0.0 || pre_rank == 1 {
        r_rank + alpha * f64::from(r_fmt)
    } else {
        r_rank
    }
}

/// 1 when both a reasoning trace and a ranking were extracted.
pub fn format_reward(parsed: &ParsedOutput) -> u8 {
    u8::from(parsed.reasoning.is_some() && parsed.ranking.is_some())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub r_rank: f64,
    pub r_fmt: u8,
    pub total: f64,
    pub pre_rank: usize,
    pub re_rank: usize,
    pub n: usize,
}

/// Reward for one output. Candidates are numbered in pre-ranked order, so
/// the target is candidate `pre_rank`. An output without a usable ranking
/// is scored as if it kept the pre-ranked order.
pub fn score_output(
    ranking: Option<&[usize]>,
    r_fmt: u8,
    pre_rank: usize,
    n: usize,
    cfg: &RewardConfig,
) -> Result<RewardRecord> {
    if pre_rank < 1 || pre_rank > n {
        return Err(Error::Domain(format!("pre_rank {pre_rank} is outside [1, {n}]")));
    }
    let re_rank = match ranking {
        Some(r) => {
            validate_permutation(r, n)?;
            r.iter().position(|&c| c == pre_rank - 1).expect("permutation") + 1
        }
        None => pre_rank,
    };
    let r_rank = ranking_reward(pre_rank, re_rank, n)?;
    Ok(RewardRecord {
        r_rank,
        r_fmt,
        total: conditional_reward(r_rank, r_fmt, pre_rank, cfg.alpha),
        pre_rank,
        re_rank,
        n,
    })
}

pub fn validate_permutation(ranking: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if ranking.len() != n {
        return Err(Error::Domain(format!(
            "ranking has {} entries, expected {n}",
            ranking.len()
        )));
    }
    for &c in ranking {
        if c >= n || std::mem::replace(&mut seen[c], true) {
            return Err(Error::Domain(format!(
                "ranking {ranking:?} is not a permutation of 0..{n}"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Reasoning,
    Ranking,
    Ignore,
}

/// `-λ_r Σ_reasoning log p - λ_o Σ_ranking log p`.
pub fn sft_loss(
    token_logprobs: &[f64],
    mask: &[Segment],
    lambda_r: f64,
    lambda_o: f64,
) -> Result<f64> {
    if token_logprobs.len() != mask.len() {
        return Err(Error::DimensionMismatch {
            expected: token_logprobs.len(),
            actual: mask.len(),
        });
    }
    if lambda_r < 0.0 || lambda_o < 0.0 {
        return Err(Error::Config(format!(
            "loss weights must be non-negative, got {lambda_r} and {lambda_o}"
        )));
    }
    let (mut reasoning, mut ranking) = (0.0, 0.0);
    for (lp, seg) in token_logprobs.iter().zip(mask) {
        match seg {
            Segment::Reasoning => reasoning += lp,
            Segment::Ranking => ranking += lp,
            Segment::Ignore => {}
        }
    }
    Ok(-lambda_r * reasoning - lambda_o * ranking)
}

fn all_equal(rewards: &[f64]) -> bool {
    rewards.windows(2).all(|w| w[0] == w[1])
}

/// Group-normalized advantages using the population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Domain(format!(
            "a group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    if all_equal(rewards) {
        return Err(Error::DegenerateGroup(rewards.len()));
    }
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g).sqrt();
    if std == 0.0 {
        return Err(Error::DegenerateGroup(rewards.len()));
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Keep only groups whose rewards are not all equal.
pub fn dynamic_sampling_filter<T: AsRef<[f64]>>(groups: Vec<T>) -> Vec<T> {
    groups
        .into_iter()
        .filter(|g| !all_equal(g.as_ref()))
        .collect()
}

/// Importance ratios `exp(new - old)` per token.
pub fn token_ratios(old: &[f64], new: &[f64]) -> Result<Vec<f64>> {
    if old.len() != new.len() {
        return Err(Error::DimensionMismatch {
            expected: old.len(),
            actual: new.len(),
        });
    }
    Ok(old.iter().zip(new).map(|(o, n)| (n - o).exp()).collect())
}

/// One sampled group as seen by the policy objective.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGroup {
    pub advantages: Vec<f64>,
    /// Per-output token ratios; `ratios[i].len() == |o_i|`.
    pub ratios: Vec<Vec<f64>>,
}

/// Token-level clipped surrogate averaged over all tokens of all groups.
pub fn dapo_objective(groups: &[PolicyGroup], cfg: &RewardConfig) -> Result<f64> {
    let (mut total, mut tokens) = (0.0, 0usize);
    for g in groups {
        if g.advantages.len() != g.ratios.len() {
            return Err(Error::DimensionMismatch {
                expected: g.advantages.len(),
                actual: g.ratios.len(),
            });
        }
        for (adv, ratios) in g.advantages.iter().zip(&g.ratios) {
            if ratios.is_empty() {
                return Err(Error::Domain("an output has no tokens".into()));
            }
            for &r in ratios {
                if !(r > 0.0 && r.is_finite()) {
                    return Err(Error::Domain(format!("ratio {r} is not positive and finite")));
                }
                let clipped = r.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
                total += (r * adv).min(clipped * adv);
            }
            tokens += ratios.len();
        }
    }
    if tokens == 0 {
        return Err(Error::Empty("no tokens to average over".into()));
    }
    Ok(total / tokens as f64)
}

/// One sampled output in the scoring input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoredOutputInput {
    #[serde(default)]
    pub raw_text: Option<String>,
    /// Zero-based permutation, used when `raw_text` is absent.
    #[serde(default)]
    pub ranking: Option<Vec<usize>>,
    pub token_logprobs_old: Vec<f64>,
    pub token_logprobs_new: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringInput {
    pub episode_id: String,
    pub pre_rank: usize,
    /// Number of candidates in the episode.
    pub n: usize,
    pub outputs: Vec<ScoredOutputInput>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub episode_id: String,
    pub rewards: Vec<RewardRecord>,
    pub kept: bool,
    pub advantages: Option<Vec<f64>>,
    /// Outputs that reproduce the pre-ranked order exactly.
    pub identity_outputs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchScore {
    pub groups: Vec<GroupScore>,
    pub kept_groups: usize,
    pub dropped_groups: usize,
    pub tokens: usize,
    /// Absent when every group was dropped.
    pub objective: Option<f64>,
}

fn output_ranking(out: &ScoredOutputInput, n: usize) -> Result<(Option<Vec<usize>>, u8)> {
    match (&out.raw_text, &out.ranking) {
        (Some(raw), None) => {
            let parsed = parse_output(raw, n);
            let fmt = format_reward(&parsed);
            Ok((parsed.ranking, fmt))
        }
        // A pre-parsed ranking carries no reasoning, so the format reward is 0.
        (None, Some(r)) => Ok((Some(r.clone()), 0)),
        _ => Err(Error::Format(
            "each output needs exactly one of raw_text or ranking".into(),
        )),
    }
}

fn score_group(input: &ScoringInput, cfg: &RewardConfig) -> Result<(GroupScore, Option<PolicyGroup>)> {
    if input.outputs.len() != cfg.group_size {
        return Err(Error::Config(format!(
            "episode {} has {} outputs, expected group size {}",
            input.episode_id,
            input.outputs.len(),
            cfg.group_size
        )));
    }
    let mut rewards = Vec::with_capacity(input.outputs.len());
    let mut ratios = Vec::with_capacity(input.outputs.len());
    let mut identity_outputs = 0;
    for out in &input.outputs {
        let (ranking, fmt) = output_ranking(out, input.n)?;
        if ranking.as_deref().is_some_and(|r| r.iter().enumerate().all(|(i, &c)| i == c)) {
            identity_outputs += 1;
        }
        rewards.push(score_output(ranking.as_deref(), fmt, input.pre_rank, input.n, cfg)?);
        ratios.push(token_ratios(&out.token_logprobs_old, &out.token_logprobs_new)?);
    }
    let totals: Vec<f64> = rewards.iter().map(|r| r.total).collect();
    let kept = !all_equal(&totals);
    let advantages = if kept { Some(group_advantages(&totals)?) } else { None };
    let policy = advantages.clone().map(|advantages| PolicyGroup { advantages, ratios });
    Ok((
        GroupScore {
            episode_id: input.episode_id.clone(),
            rewards,
            kept,
            advantages,
            identity_outputs,
        },
        policy,
    ))
}

/// Score a batch: rewards per output, dynamic sampling, advantages and the
/// clipped objective over the kept groups.
pub fn score_batch(inputs: &[ScoringInput], cfg: &RewardConfig) -> Result<BatchScore> {
    cfg.validate()?;
    let scored: Vec<(GroupScore, Option<PolicyGroup>)> = inputs
        .par_iter()
        .map(|g| score_group(g, cfg))
        .collect::<Result<_>>()?;
    let (groups, policies): (Vec<_>, Vec<_>) = scored.into_iter().unzip();
    let policies: Vec<PolicyGroup> = policies.into_iter().flatten().collect();
    let tokens = policies
        .iter()
        .flat_map(|p| p.ratios.iter().map(Vec::len))
        .sum();
    let objective = if policies.is_empty() {
        None
    } else {
        Some(dapo_objective(&policies, cfg)?)
    };
    Ok(BatchScore {
        kept_groups: policies.len(),
        dropped_groups: groups.len() - policies.len(),
        groups,
        tokens,
        objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_reward_examples() {
        assert!((ranking_reward(5, 1, 10).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(ranking_reward(3, 3, 10).unwrap(), 0.0);
        assert!((ranking_reward(1, 10, 10).unwrap() + 0.9).abs() < 1e-12);
        assert!(ranking_reward(0, 1, 10).is_err());
        assert!(ranking_reward(1, 11, 10).is_err());
    }

    #[test]
    fn conditional_gate() {
        assert!((conditional_reward(0.4, 1, 5, 0.1) - 0.5).abs() < 1e-12);
        assert_eq!(conditional_reward(0.0, 1, 3, 0.1), 0.0);
        assert!((conditional_reward(0.0, 1, 1, 0.1) - 0.1).abs() < 1e-12);
        assert_eq!(conditional_reward(-0.2, 1, 3, 0.1), -0.2);
    }

    #[test]
    fn sft_examples() {
        use Segment::*;
        let lp = [-1.0, -1.0, -1.0];
        assert_eq!(sft_loss(&lp, &[Reasoning, Reasoning, Ranking], 0.5, 1.0).unwrap(), 2.0);
        assert_eq!(sft_loss(&lp, &[Ignore; 3], 0.5, 1.0).unwrap(), 0.0);
        assert_eq!(sft_loss(&lp, &[Reasoning, Reasoning, Ranking], 0.0, 1.0).unwrap(), 1.0);
        assert!(sft_loss(&lp, &[Ignore; 2], 0.5, 1.0).is_err());
        assert!(sft_loss(&lp, &[Ignore; 3], -0.5, 1.0).is_err());
    }

    #[test]
    fn advantages() {
        let a = group_advantages(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((a[0] - 3f64.sqrt()).abs() < 1e-12);
        for x in &a[1..] {
            assert!((x + 1.0 / 3f64.sqrt()).abs() < 1e-12);
        }
        assert!(matches!(
            group_advantages(&[0.3; 4]),
            Err(Error::DegenerateGroup(4))
        ));
        assert!(group_advantages(&[1.0]).is_err());
    }

    #[test]
    fn clip_cases() {
        let cfg = RewardConfig::default();
        let g = |adv: f64, r: f64| PolicyGroup {
            advantages: vec![adv],
            ratios: vec![vec![r]],
        };
        assert!((dapo_objective(&[g(2.0, 10.0)], &cfg).unwrap() - 1.28 * 2.0).abs() < 1e-12);
        // For a negative advantage the clipped branch 0.8 * A is the smaller one.
        assert!((dapo_objective(&[g(-2.0, 0.1)], &cfg).unwrap() + 0.8 * 2.0).abs() < 1e-12);
        assert!((dapo_objective(&[g(-2.0, 10.0)], &cfg).unwrap() + 10.0 * 2.0).abs() < 1e-12);
        assert!(dapo_objective(&[g(1.0, 0.0)], &cfg).is_err());
        assert!(dapo_objective(&[g(1.0, f64::NAN)], &cfg).is_err());
    }

    #[test]
    fn filter() {
        let kept = dynamic_sampling_filter(vec![vec![0.4; 4], vec![0.4, 0.0, -0.2, 0.4]]);
        assert_eq!(kept, vec![vec![0.4, 0.0, -0.2, 0.4]]);
    }

    #[test]
    fn score_output_uses_pre_rank_as_target() {
        let cfg = RewardConfig::default();
        // Target is candidate 3 (index 2); moved to the top.
        let rec = score_output(Some(&[2, 0, 1, 3]), 1, 3, 4, &cfg).unwrap();
        assert_eq!(rec.re_rank, 1);
        assert!((rec.total - (0.5 + 0.1)).abs() < 1e-12);
        let rec = score_output(None, 0, 3, 4, &cfg).unwrap();
        assert_eq!((rec.re_rank, rec.total), (3, 0.0));
        assert!(score_output(Some(&[0, 0, 1, 2]), 1, 1, 4, &cfg).is_err());
    }

    #[test]
    fn batch_round_trip() {
        let cfg = RewardConfig {
            group_size: 2,
            ..Default::default()
        };
        let out = |raw: &str| ScoredOutputInput {
            raw_text: Some(raw.into()),
            ranking: None,
            token_logprobs_old: vec![-1.0, -1.0],
            token_logprobs_new: vec![-1.0, -1.0],
        };
        let inputs = vec![
            ScoringInput {
                episode_id: "e1".into(),
                pre_rank: 2,
                n: 3,
                outputs: vec![
                    out(r#"{"explanation":"x","recommendations":["2","1","3"]}"#),
                    out("nothing"),
                ],
            },
            ScoringInput {
                episode_id: "e2".into(),
                pre_rank: 2,
                n: 3,
                outputs: vec![out("nothing"), out("nothing")],
            },
        ];
        let batch = score_batch(&inputs, &cfg).unwrap();
        assert_eq!((batch.kept_groups, batch.dropped_groups, batch.tokens), (1, 1, 4));
        // Ratios are 1, so the objective is the token-weighted mean advantage.
        assert!(batch.objective.unwrap().abs() < 1e-12);
        assert_eq!(batch.groups[0].rewards[0].re_rank, 1);
    }
}
