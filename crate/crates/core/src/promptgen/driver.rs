use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    build_chat_sample, build_rejection_prompt, build_targeted_prompt, ChatCompletion, ChatMessage,
    ChatSample, PromptConfig, PromptContext, Provenance, RerankEpisode, Role, Strategy,
};
use crate::error::{Error, Result};
use crate::parse::{parse_output, ParsedOutput};

pub const DEFAULT_MAX_ATTEMPTS: usize = 8;

const REFORMAT_REQUEST: &str = "Your previous response could not be parsed. Reply again following the \
EXACT format requested above, and end with the line \"Prediction: Candidate <number>\".";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExhaustionReport {
    pub episode_id: String,
    pub attempts: usize,
    /// Raw teacher responses, one per attempt.
    pub transcripts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RejectionOutcome {
    Accepted(ChatSample),
    Exhausted(ExhaustionReport),
}

/// Trace text for the assistant message: the parsed reasoning, or the whole
/// response when the parser found none.
fn trace_of(parsed: &ParsedOutput, raw: &str) -> String {
    parsed
        .reasoning
        .clone()
        .unwrap_or_else(|| raw.trim().to_string())
}

/// Query without disclosing the target until the top prediction matches it.
pub fn run_rejection(
    client: &dyn ChatCompletion,
    episode: &RerankEpisode,
    ctx: &PromptContext<'_>,
    cfg: &PromptConfig,
    max_attempts: usize,
) -> Result<RejectionOutcome> {
    if max_attempts == 0 {
        return Err(Error::Config("max_attempts must be at least 1".into()));
    }
    let prompt = build_rejection_prompt(episode, ctx, cfg)?;
    let messages = [ChatMessage::new(Role::User, prompt)];
    let target = episode.pre_rank_position - 1;
    let mut transcripts = Vec::new();
    for attempt in 1..=max_attempts {
        let raw = client.complete(&messages)?;
        let parsed = parse_output(&raw, episode.n());
        let predicted = parsed.ranking.as_ref().map(|r| r[0]);
        log::debug!(
            "episode {} attempt {attempt}: predicted {predicted:?}, target {target}",
            episode.episode_id
        );
        if predicted == Some(target) {
            let provenance = Provenance {
                strategy: Strategy::Rejection,
                knowledge_priming: cfg.with_category_hierarchy,
                attempts: attempt,
                episode_id: episode.episode_id.clone(),
            };
            let sample = build_chat_sample(episode, &trace_of(&parsed, &raw), ctx, cfg, provenance)?;
            return Ok(RejectionOutcome::Accepted(sample));
        }
        transcripts.push(raw);
    }
    Ok(RejectionOutcome::Exhausted(ExhaustionReport {
        episode_id: episode.episode_id.clone(),
        attempts: max_attempts,
        transcripts,
    }))
}

/// Query with the target disclosed. An unparseable answer gets one
/// reformat request; a second failure is an error.
pub fn run_targeted(
    client: &dyn ChatCompletion,
    episode: &RerankEpisode,
    ctx: &PromptContext<'_>,
    cfg: &PromptConfig,
) -> Result<ChatSample> {
    let prompt = build_targeted_prompt(episode, ctx, cfg)?;
    let mut messages = vec![ChatMessage::new(Role::User, prompt)];
    let mut raw = client.complete(&messages)?;
    let mut parsed = parse_output(&raw, episode.n());
    let mut attempts = 1;
    if !parsed.is_valid() {
        messages.push(ChatMessage::new(Role::Assistant, raw.clone()));
        messages.push(ChatMessage::new(Role::User, REFORMAT_REQUEST));
        raw = client.complete(&messages)?;
        parsed = parse_output(&raw, episode.n());
        attempts = 2;
        if !parsed.is_valid() {
            return Err(Error::Format(format!(
                "episode {}: teacher output unparseable after a reformat request",
                episode.episode_id
            )));
        }
    }
    let provenance = Provenance {
        strategy: Strategy::Targeted,
        knowledge_priming: cfg.with_category_hierarchy,
        attempts,
        episode_id: episode.episode_id.clone(),
    };
    build_chat_sample(episode, &trace_of(&parsed, &raw), ctx, cfg, provenance)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum TraceOutcome {
    Sample(ChatSample),
    Exhausted(ExhaustionReport),
    Failed {
        episode_id: String,
        kind: String,
        message: String,
    },
}

/// Generate traces for every episode with at most `concurrency` requests in
/// flight. Results come back in episode order.
pub fn generate_traces(
    client: &dyn ChatCompletion,
    episodes: &[RerankEpisode],
    ctx: &PromptContext<'_>,
    cfg: &PromptConfig,
    strategy: Strategy,
    max_attempts: usize,
    concurrency: usize,
) -> Result<Vec<TraceOutcome>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    let outcomes = pool.install(|| {
        episodes
            .par_iter()
            .map(|ep| {
                let result = match strategy {
                    Strategy::Targeted => run_targeted(client, ep, ctx, cfg).map(TraceOutcome::Sample),
                    Strategy::Rejection => {
                        run_rejection(client, ep, ctx, cfg, max_attempts).map(|o| match o {
                            RejectionOutcome::Accepted(s) => TraceOutcome::Sample(s),
                            RejectionOutcome::Exhausted(r) => TraceOutcome::Exhausted(r),
                        })
                    }
                };
                result.unwrap_or_else(|e| TraceOutcome::Failed {
                    episode_id: ep.episode_id.clone(),
                    kind: e.kind().into(),
                    message: e.to_string(),
                })
            })
            .collect()
    });
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::super::tests::fixture;
    use super::super::{MockTeacher, ScriptedClient};
    use super::*;

    fn answer(n: usize) -> String {
        format!("Step 1 Reasoning: \"ok\"\nPrediction: Candidate {n}")
    }

    #[test]
    fn rejection_attempt_counts() {
        let (reg, meta, ep) = fixture();
        let ctx = PromptContext::new(&reg, &meta);
        let cfg = PromptConfig::default();
        // Target is candidate 3.
        let client = ScriptedClient::new([answer(3)]);
        let RejectionOutcome::Accepted(s) = run_rejection(&client, &ep, &ctx, &cfg, 8).unwrap() else {
            panic!("expected acceptance");
        };
        assert_eq!(s.provenance.attempts, 1);
        assert_eq!(s.provenance.strategy, Strategy::Rejection);

        let client = ScriptedClient::new([answer(1), answer(2), answer(3)]);
        let RejectionOutcome::Accepted(s) = run_rejection(&client, &ep, &ctx, &cfg, 3).unwrap() else {
            panic!("expected acceptance");
        };
        assert_eq!(s.provenance.attempts, 3);
        assert_eq!(s.assistant().unwrap().matches("Prediction").count(), 0);

        let client = ScriptedClient::new([answer(1), answer(1), answer(1), answer(1), answer(3)]);
        let RejectionOutcome::Exhausted(r) = run_rejection(&client, &ep, &ctx, &cfg, 4).unwrap() else {
            panic!("expected exhaustion");
        };
        assert_eq!((r.attempts, r.transcripts.len()), (4, 4));
    }

    #[test]
    fn rejection_surfaces_client_errors() {
        let (reg, meta, ep) = fixture();
        let ctx = PromptContext::new(&reg, &meta);
        let client = ScriptedClient::new(Vec::<String>::new());
        client.push_error("connection refused");
        let err = run_rejection(&client, &ep, &ctx, &PromptConfig::default(), 3).unwrap_err();
        assert_eq!(err.kind(), "client");
    }

    #[test]
    fn targeted_retry_policy() {
        let (reg, meta, ep) = fixture();
        let ctx = PromptContext::new(&reg, &meta);
        let cfg = PromptConfig::default();
        let client = ScriptedClient::new([r#"{"explanation":"e","recommendations":["3","1"]}"#]);
        let s = run_targeted(&client, &ep, &ctx, &cfg).unwrap();
        assert_eq!(s.provenance.strategy, Strategy::Targeted);
        assert_eq!(s.provenance.attempts, 1);

        let client = ScriptedClient::new(["just prose", "still prose"]);
        assert_eq!(run_targeted(&client, &ep, &ctx, &cfg).unwrap_err().kind(), "format");
        let reqs = client.requests();
        assert_eq!(reqs.len(), 2);
        assert_eq!(reqs[1].len(), 3);

        let client = ScriptedClient::new(["just prose".to_string(), answer(3)]);
        assert_eq!(run_targeted(&client, &ep, &ctx, &cfg).unwrap().provenance.attempts, 2);
    }

    #[test]
    fn mock_teacher_is_deterministic() {
        let (reg, meta, ep) = fixture();
        let ctx = PromptContext::new(&reg, &meta);
        let cfg = PromptConfig::default();
        let eps = vec![ep.clone(); 1];
        let run = || {
            generate_traces(&MockTeacher::new(4), &eps, &ctx, &cfg, Strategy::Rejection, 8, 2).unwrap()
        };
        assert_eq!(run(), run());
        let t = generate_traces(&MockTeacher::new(4), &eps, &ctx, &cfg, Strategy::Targeted, 8, 2).unwrap();
        let TraceOutcome::Sample(s) = &t[0] else {
            panic!("targeted mock must succeed");
        };
        assert!(s.assistant().unwrap().contains("<|sid_begin|>"));
    }
}
