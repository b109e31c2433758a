//! Robust parsing of free-form model output into a reasoning trace and a
//! complete candidate ranking.
//!
//! Parsing runs in three stages:
//!
//! 1. JSON objects are extracted from the text and inspected from last to
//!    first. The first (i.e. textually last) object carrying a
//!    `recommendations` or `ranking` array with at least one usable index
//!    wins. Reasoning comes from `explanation` or `reasoning`.
//! 2. Otherwise an ordered list of regular expressions is tried
//!    (see [`REGEX_PATTERNS`]). The first pattern producing a usable index
//!    wins; within that pattern the last occurrence in the text is used.
//! 3. Indices (1-based in model text) are filtered to `[1, n]`, deduplicated
//!    in order, shifted to 0-based, and completed with the missing
//!    candidates in ascending order.

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Json,
    Regex,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub reasoning: Option<String>,
    /// Zero-based permutation of `0..n`.
    pub ranking: Option<Vec<usize>>,
    pub stage: Stage,
}

impl ParsedOutput {
    fn none() -> Self {
        Self {
            reasoning: None,
            ranking: None,
            stage: Stage::None,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.ranking.is_some()
    }

    /// 1-based position of candidate `idx` (0-based) in the ranking.
    pub fn rank_of(&self, idx: usize) -> Option<usize> {
        self.ranking
            .as_ref()?
            .iter()
            .position(|&c| c == idx)
            .map(|p| p + 1)
    }
}

const RANKING_KEYS: [&str; 2] = ["recommendations", "ranking"];
const REASONING_KEYS: [&str; 2] = ["explanation", "reasoning"];

/// Stage II patterns, in priority order.
pub const REGEX_PATTERNS: [(&str, &str); 4] = [
    (
        "recommendations",
        r#"(?i)["']?recommendations["']?\s*[:=]\s*\[([^\[\]]*)\]"#,
    ),
    (
        "ranking",
        r#"(?i)["']?\branking["']?\s*[:=]\s*(?:\[([^\[\]]*)\]|((?:\d+\s*(?:,|>|\s)\s*)*\d+))"#,
    ),
    ("prediction", r"(?i)prediction\s*:\s*candidate\s*#?\s*(\d+)"),
    (
        "bracket_list",
        r#"\[\s*["']?\d+["']?(?:\s*,\s*["']?\d+["']?)*\s*,?\s*\]"#,
    ),
];

static COMPILED: LazyLock<Vec<Regex>> = LazyLock::new(|| {
    REGEX_PATTERNS
        .iter()
        .map(|(_, p)| Regex::new(p).expect("valid pattern"))
        .collect()
});
static INTEGER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").expect("valid regex"));

/// Balanced `{...}` spans. Braces inside double-quoted strings are ignored.
/// When a span is found the scan resumes after it, so nested objects are
/// reported only through their outermost span; an unmatched `{` is skipped.
pub fn extract_json_candidates(raw: &str) -> Vec<&str> {
    let bytes = raw.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            if let Some(end) = matching_brace(bytes, i) {
                out.push(&raw[i..=end]);
                i = end + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

fn matching_brace(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (off, &b) in bytes[start..].iter().enumerate() {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(start + off);
                }
            }
            _ => {}
        }
    }
    None
}

/// Rewrite single-quoted strings as double-quoted ones and drop trailing
/// commas before `}` or `]`.
pub fn repair_json(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut quote: Option<char> = None;
    let mut escaped = false;
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match quote {
            Some(q) => {
                if escaped {
                    escaped = false;
                    if q == '\'' && c == '\'' {
                        // `\'` is not a JSON escape; drop the backslash.
                        out.pop();
                    }
                    out.push(c);
                } else if c == '\\' {
                    escaped = true;
                    out.push(c);
                } else if c == q {
                    quote = None;
                    out.push('"');
                } else if q == '\'' && c == '"' {
                    out.push_str("\\\"");
                } else {
                    out.push(c);
                }
            }
            None => match c {
                '"' | '\'' => {
                    quote = Some(c);
                    out.push('"');
                }
                ',' => {
                    let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
                    if !matches!(next, Some('}') | Some(']')) {
                        out.push(c);
                    }
                }
                _ => out.push(c),
            },
        }
        i += 1;
    }
    out
}

fn parse_object(candidate: &str) -> Option<serde_json::Map<String, Value>> {
    let strict = serde_json::from_str::<Value>(candidate).ok();
    let value = strict.or_else(|| serde_json::from_str::<Value>(&repair_json(candidate)).ok())?;
    match value {
        Value::Object(map) => Some(map),
        _ => None,
    }
}

fn value_index(v: &Value) -> Option<u64> {
    match v {
        Value::Number(n) => n.as_u64(),
        Value::String(s) => {
            let s = s.trim();
            s.parse().ok().or_else(|| INTEGER.find(s)?.as_str().parse().ok())
        }
        _ => None,
    }
}

fn lookup<'a>(map: &'a serde_json::Map<String, Value>, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| {
        map.iter()
            .find(|(key, _)| key.eq_ignore_ascii_case(k))
            .map(|(_, v)| v)
    })
}

/// Stage III: filter, dedupe, shift to 0-based, complete the permutation.
pub fn complete_ranking(indices: impl IntoIterator<Item = u64>, n: usize) -> Option<Vec<usize>> {
    let mut seen = HashSet::new();
    let mut ranking: Vec<usize> = indices
        .into_iter()
        .filter(|&i| i >= 1 && i <= n as u64)
        .map(|i| (i - 1) as usize)
        .filter(|&i| seen.insert(i))
        .collect();
    if ranking.is_empty() {
        return None;
    }
    ranking.extend((0..n).filter(|i| !seen.contains(i)));
    Some(ranking)
}

fn non_empty(s: &str) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_string())
}

fn stage_json(raw: &str, n: usize) -> Option<ParsedOutput> {
    for candidate in extract_json_candidates(raw).into_iter().rev() {
        let Some(map) = parse_object(candidate) else {
            continue;
        };
        let Some(Value::Array(items)) = lookup(&map, &RANKING_KEYS) else {
            continue;
        };
        let Some(ranking) = complete_ranking(items.iter().filter_map(value_index), n) else {
            continue;
        };
        let reasoning = match lookup(&map, &REASONING_KEYS) {
            Some(Value::String(s)) => non_empty(s),
            _ => {
                let start = candidate.as_ptr() as usize - raw.as_ptr() as usize;
                non_empty(strip_fence(&raw[..start]))
            }
        };
        return Some(ParsedOutput {
            reasoning,
            ranking: Some(ranking),
            stage: Stage::Json,
        });
    }
    None
}

fn strip_fence(prefix: &str) -> &str {
    let t = prefix.trim_end();
    t.strip_suffix("```json")
        .or_else(|| t.strip_suffix("```"))
        .unwrap_or(t)
}

fn stage_regex(raw: &str, n: usize) -> Option<ParsedOutput> {
    for re in COMPILED.iter() {
        let Some(m) = re.find_iter(raw).last() else {
            continue;
        };
        // Indices live in the capture groups when a pattern has them,
        // otherwise in the whole match.
        let caps = re.captures(m.as_str()).expect("a match re-captures");
        let body = if caps.len() > 1 {
            caps.iter()
                .skip(1)
                .flatten()
                .map(|g| g.as_str())
                .collect::<Vec<_>>()
                .join(",")
        } else {
            m.as_str().to_string()
        };
        let ints: Vec<u64> = INTEGER
            .find_iter(&body)
            .filter_map(|d| d.as_str().parse().ok())
            .collect();
        if let Some(ranking) = complete_ranking(ints, n) {
            return Some(ParsedOutput {
                reasoning: non_empty(strip_fence(&raw[..m.start()])),
                ranking: Some(ranking),
                stage: Stage::Regex,
            });
        }
    }
    None
}

/// Parse raw model text for an episode with `n` candidates. Never fails;
/// unusable text yields `stage == None` with both fields absent.
pub fn parse_output(raw: &str, n: usize) -> ParsedOutput {
    if n == 0 {
        return ParsedOutput::none();
    }
    stage_json(raw, n)
        .or_else(|| stage_regex(raw, n))
        .unwrap_or_else(ParsedOutput::none)
}

/// Canonical text for a parsed result: a JSON object with `explanation`
/// and 1-based string `recommendations`.
pub fn render_output(reasoning: Option<&str>, ranking: &[usize]) -> String {
    let recs: Vec<String> = ranking.iter().map(|i| (i + 1).to_string()).collect();
    serde_json::json!({
        "explanation": reasoning.unwrap_or(""),
        "recommendations": recs,
    })
    .to_string()
}

#[derive(Debug, Clone, Deserialize)]
pub struct ParseCheckInput {
    pub raw: String,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseCheckRecord {
    pub stage: Stage,
    pub ranking: Option<Vec<usize>>,
    pub reasoning_present: bool,
}

impl From<&ParsedOutput> for ParseCheckRecord {
    fn from(p: &ParsedOutput) -> Self {
        Self {
            stage: p.stage,
            ranking: p.ranking.clone(),
            reasoning_present: p.reasoning.is_some(),
        }
    }
}

/// Handle one `{raw, n}` JSON line.
pub fn parse_check_line(line: &str) -> Result<ParseCheckRecord> {
    let input: ParseCheckInput = serde_json::from_str(line)?;
    if input.n == 0 {
        return Err(Error::Domain("n must be at least 1".into()));
    }
    Ok((&parse_output(&input.raw, input.n)).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_example() {
        let raw = r#"{"explanation":"user likes tents","recommendations":["3","1","2","4","5","6","7","8","9","10"]}"#;
        let p = parse_output(raw, 10);
        assert_eq!(p.stage, Stage::Json);
        assert_eq!(p.ranking.unwrap(), vec![2, 0, 1, 3, 4, 5, 6, 7, 8, 9]);
        assert_eq!(p.reasoning.as_deref(), Some("user likes tents"));
    }

    #[test]
    fn empty_is_none() {
        assert_eq!(parse_output("", 10), ParsedOutput::none());
        assert_eq!(parse_output("no idea", 10), ParsedOutput::none());
    }

    #[test]
    fn prediction_fallback() {
        let p = parse_output("I think so.\nPrediction: Candidate 3", 10);
        assert_eq!(p.stage, Stage::Regex);
        assert_eq!(p.ranking.unwrap(), vec![2, 0, 1, 3, 4, 5, 6, 7, 8, 9]);
        assert_eq!(p.reasoning.as_deref(), Some("I think so."));
    }

    #[test]
    fn filter_and_dedupe() {
        let p = parse_output(r#"{"recommendations":["1","1","11","2"]}"#, 10);
        assert_eq!(p.ranking.unwrap(), (0..10).collect::<Vec<_>>());
        let p = parse_output(r#"{"recommendations":["2","2","11","1"]}"#, 3);
        assert_eq!(p.ranking.unwrap(), vec![1, 0, 2]);
    }

    #[test]
    fn reverse_traversal_skips_later_object() {
        let raw = r#"{"recommendations":[2,1,3]} then {"note":"done"}"#;
        let p = parse_output(raw, 3);
        assert_eq!(p.stage, Stage::Json);
        assert_eq!(p.ranking.unwrap(), vec![1, 0, 2]);
    }

    #[test]
    fn last_object_wins() {
        let raw = r#"{"ranking":[1,2,3]} {"ranking":[3,2,1]}"#;
        assert_eq!(parse_output(raw, 3).ranking.unwrap(), vec![2, 1, 0]);
    }

    #[test]
    fn candidates() {
        assert_eq!(extract_json_candidates("x {\"a\":1} y"), vec!["{\"a\":1}"]);
        assert_eq!(
            extract_json_candidates(r#"{"a":{"b":1}}"#),
            vec![r#"{"a":{"b":1}}"#]
        );
        assert!(extract_json_candidates("{ unbalanced").is_empty());
        assert_eq!(extract_json_candidates(r#"{ {"a":"}"}"#), vec![r#"{"a":"}"}"#]);
        assert_eq!(
            extract_json_candidates("```json\n{\"a\":1}\n```"),
            vec!["{\"a\":1}"]
        );
    }

    #[test]
    fn repairs() {
        assert_eq!(repair_json("{'a': [1, 2,], }"), r#"{"a": [1, 2] }"#);
        assert_eq!(repair_json(r#"{'say': "it's"}"#), r#"{"say": "it's"}"#);
        assert_eq!(repair_json(r#"{'q': 'a "b"'}"#), r#"{"q": "a \"b\""}"#);
        let p = parse_output("{'reasoning': 'ok', 'ranking': ['2', '1',],}", 2);
        assert_eq!(p.stage, Stage::Json);
        assert_eq!(p.ranking.unwrap(), vec![1, 0]);
        assert_eq!(p.reasoning.as_deref(), Some("ok"));
    }

    #[test]
    fn regex_order() {
        // recommendations beats bracket lists even when it appears first.
        let raw = "recommendations: [2, 1] and also [3]";
        let p = parse_output(raw, 3);
        assert_eq!(p.stage, Stage::Regex);
        assert_eq!(p.ranking.unwrap(), vec![1, 0, 2]);
        // last occurrence within the winning pattern.
        let p = parse_output("Prediction: Candidate 1 ... Prediction: Candidate 2", 3);
        assert_eq!(p.ranking.unwrap(), vec![1, 0, 2]);
        let p = parse_output("Ranking: 3 > 1 > 2", 3);
        assert_eq!(p.ranking.unwrap(), vec![2, 0, 1]);
        let p = parse_output("final answer [2, 3]", 3);
        assert_eq!(p.ranking.unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn json_without_explanation_uses_prefix() {
        let p = parse_output("Because reasons.\n```json\n{\"ranking\":[2,1]}\n```", 2);
        assert_eq!(p.reasoning.as_deref(), Some("Because reasons."));
    }

    #[test]
    fn render_round_trip() {
        let p = parse_output("Prediction: Candidate 4", 5);
        let again = parse_output(&render_output(None, p.ranking.as_ref().unwrap()), 5);
        assert_eq!(again.ranking, p.ranking);
    }

    #[test]
    fn rank_of() {
        let p = parse_output("Prediction: Candidate 3", 4);
        assert_eq!(p.rank_of(2), Some(1));
        assert_eq!(p.rank_of(0), Some(2));
    }

    #[test]
    fn parse_check() {
        let rec = parse_check_line(r#"{"raw":"Prediction: Candidate 2","n":3}"#).unwrap();
        assert_eq!(rec.stage, Stage::Regex);
        assert_eq!(rec.ranking, Some(vec![1, 0, 2]));
        assert!(!rec.reasoning_present);
        assert!(parse_check_line("{").is_err());
        assert!(parse_check_line(r#"{"raw":"","n":0}"#).is_err());
    }
}
