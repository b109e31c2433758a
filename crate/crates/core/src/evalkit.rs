//! Leave-one-out ranking metrics, a first-order Markov retriever that
//! produces pre-ranked candidate lists, and re-ranking reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{InteractionLog, SplitSet};
use crate::error::{Error, Result};
use crate::parse::parse_output;
use crate::promptgen::RerankEpisode;
use crate::reward::validate_permutation;

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Domain("K must be at least 1".into()));
    }
    Ok(())
}

/// 1-based position of `target` within the first `k` entries.
fn hit_position<T: PartialEq>(ranked: &[T], target: &T, k: usize) -> Option<usize> {
    ranked.iter().take(k).position(|x| x == target).map(|p| p + 1)
}

/// 1 when `target` is among the first `k` entries. Lists shorter than `k`
/// are evaluated on what is available.
pub fn recall_at_k<T: PartialEq>(ranked: &[T], target: &T, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(f64::from(u8::from(hit_position(ranked, target, k).is_some())))
}

/// `1 / log2(j + 1)` for a hit at 1-based position `j <= k`, else 0. With a
/// single relevant item the ideal DCG is 1.
pub fn ndcg_at_k<T: PartialEq>(ranked: &[T], target: &T, k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(hit_position(ranked, target, k).map_or(0.0, |j| 1.0 / ((j + 1) as f64).log2()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Recall,
    Ndcg,
}

impl Metric {
    pub fn label(self, k: usize) -> String {
        match self {
            Metric::Recall => format!("recall@{k}"),
            Metric::Ndcg => format!("ndcg@{k}"),
        }
    }

    fn eval<T: PartialEq>(self, ranked: &[T], target: &T, k: usize) -> Result<f64> {
        match self {
            Metric::Recall => recall_at_k(ranked, target, k),
            Metric::Ndcg => ndcg_at_k(ranked, target, k),
        }
    }
}

/// Mean of `metric@k` over `(ranked list, target)` pairs.
pub fn mean_metric<T: PartialEq + Sync>(
    metric: Metric,
    lists: &[(Vec<T>, T)],
    k: usize,
) -> Result<f64> {
    if lists.is_empty() {
        return Err(Error::Empty("no users to average over".into()));
    }
    let total: f64 = lists
        .par_iter()
        .map(|(ranked, target)| metric.eval(ranked, target, k))
        .collect::<Result<Vec<f64>>>()?
        .iter()
        .sum();
    Ok(total / lists.len() as f64)
}

/// First-order Markov next-item model with Dirichlet smoothing toward item
/// popularity: `score(b | a) = (c(a, b) + mu * pop(b)) / (c(a) + mu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovRetriever {
    transitions: HashMap<String, HashMap<String, usize>>,
    outgoing: HashMap<String, usize>,
    /// Items ordered by descending count, then id.
    by_popularity: Vec<(String, usize)>,
    total: usize,
    smoothing: f64,
}

impl MarkovRetriever {
    pub fn fit(train: &InteractionLog, smoothing: f64) -> Result<Self> {
        if !(smoothing > 0.0 && smoothing.is_finite()) {
            return Err(Error::Config(format!(
                "smoothing must be positive, got {smoothing}"
            )));
        }
        if train.is_empty() {
            return Err(Error::Empty("training log has no events".into()));
        }
        let mut transitions: HashMap<String, HashMap<String, usize>> = HashMap::new();
        let mut outgoing: HashMap<String, usize> = HashMap::new();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for seq in train.users().values() {
            for w in seq.windows(2) {
                *transitions
                    .entry(w[0].item_id.clone())
                    .or_default()
                    .entry(w[1].item_id.clone())
                    .or_default() += 1;
                *outgoing.entry(w[0].item_id.clone()).or_default() += 1;
            }
            for it in seq {
                *counts.entry(it.item_id.clone()).or_default() += 1;
            }
        }
        let total = counts.values().sum();
        let mut by_popularity: Vec<(String, usize)> = counts.into_iter().collect();
        by_popularity.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(Self {
            transitions,
            outgoing,
            by_popularity,
            total,
            smoothing,
        })
    }

    pub fn transition_count(&self, from: &str, to: &str) -> usize {
        self.transitions
            .get(from)
            .and_then(|m| m.get(to))
            .copied()
            .unwrap_or(0)
    }

    pub fn num_items(&self) -> usize {
        self.by_popularity.len()
    }

    /// Top-`k` items after the last history item. Ties break by popularity
    /// and then by item id; an empty or unseen history yields the
    /// popularity order.
    pub fn predict(&self, history: &[String], k: usize) -> Vec<String> {
        let row = history.last().and_then(|a| {
            Some((self.transitions.get(a)?, self.outgoing[a] as f64))
        });
        let Some((row, out)) = row else {
            return self.by_popularity.iter().take(k).map(|(id, _)| id.clone()).collect();
        };
        let mu = self.smoothing;
        let total = self.total as f64;
        let mut scored: Vec<(f64, usize, &str)> = self
            .by_popularity
            .iter()
            .enumerate()
            .map(|(rank, (id, count))| {
                let c = row.get(id).copied().unwrap_or(0) as f64;
                ((c + mu * *count as f64 / total) / (out + mu), rank, id.as_str())
            })
            .collect();
        // `rank` is the popularity order, which already encodes the tie-break.
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, _, id)| id.to_string()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeBuild {
    pub episodes: Vec<RerankEpisode>,
    /// Users whose held-out item was not retrieved into the candidates.
    pub skipped: usize,
}

/// One episode per user whose held-out item appears in the retriever's
/// top `n_candidates`. The history is everything before the held-out item.
pub fn build_episodes(
    split: &SplitSet,
    retriever: &MarkovRetriever,
    n_candidates: usize,
    which: EvalSplit,
) -> Result<EpisodeBuild> {
    if n_candidates < 2 {
        return Err(Error::Config("episodes need at least 2 candidates".into()));
    }
    let built: Vec<Option<RerankEpisode>> = split
        .train
        .par_iter()
        .map(|(user, train_seq)| {
            let mut history: Vec<String> = train_seq.iter().map(|i| i.item_id.clone()).collect();
            let target = match which {
                EvalSplit::Valid => split.valid.get(user),
                EvalSplit::Test => {
                    if let Some(v) = split.valid.get(user) {
                        history.push(v.item_id.clone());
                    }
                    split.test.get(user)
                }
            };
            let Some(target) = target else {
                return Ok(None);
            };
            let candidates = retriever.predict(&history, n_candidates);
            if !candidates.contains(&target.item_id) || candidates.len() < 2 {
                return Ok(None);
            }
            RerankEpisode::new(user.clone(), history, candidates, target.item_id.clone()).map(Some)
        })
        .collect::<Result<_>>()?;
    let skipped = built.iter().filter(|e| e.is_none()).count();
    Ok(EpisodeBuild {
        episodes: built.into_iter().flatten().collect(),
        skipped,
    })
}

/// A model output for one episode, as raw text or as a 0-based ranking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeOutput {
    pub episode_id: String,
    #[serde(default)]
    pub raw_text: Option<String>,
    #[serde(default)]
    pub ranking: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    /// Keyed by labels such as `recall@5`.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub episodes: usize,
    pub parsed: usize,
    pub parse_failures: usize,
    /// K values larger than the shortest candidate list; those were
    /// evaluated on the available prefix.
    pub truncated_ks: Vec<usize>,
    pub rows: Vec<MethodRow>,
}

fn metric_row(
    method: &str,
    lists: &[(Vec<usize>, usize)],
    ks: &[usize],
) -> Result<MethodRow> {
    let mut metrics = BTreeMap::new();
    for &k in ks {
        for m in [Metric::Recall, Metric::Ndcg] {
            metrics.insert(m.label(k), mean_metric(m, lists, k)?);
        }
    }
    Ok(MethodRow {
        method: method.into(),
        metrics,
    })
}

/// Metrics of the pre-ranked lists and of the re-ranked lists. Outputs
/// without a usable ranking fall back to the pre-ranked order and are
/// counted as parse failures.
pub fn evaluate_rerank(
    episodes: &[RerankEpisode],
    outputs: &[EpisodeOutput],
    ks: &[usize],
    method: &str,
) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::Empty("no episodes to evaluate".into()));
    }
    if ks.is_empty() {
        return Err(Error::Config("at least one K is required".into()));
    }
    for &k in ks {
        check_k(k)?;
    }
    let mut by_id: HashMap<&str, &EpisodeOutput> = HashMap::new();
    for o in outputs {
        if by_id.insert(&o.episode_id, o).is_some() {
            return Err(Error::Domain(format!("duplicate output for episode {}", o.episode_id)));
        }
    }
    let ids: BTreeSet<&str> = episodes.iter().map(|e| e.episode_id.as_str()).collect();
    if ids.len() != episodes.len() {
        return Err(Error::Domain("duplicate episode ids".into()));
    }
    if let Some(extra) = by_id.keys().find(|k| !ids.contains(*k)) {
        return Err(Error::Domain(format!("output for unknown episode {extra}")));
    }
    let rows: Vec<(Vec<usize>, bool)> = episodes
        .par_iter()
        .map(|ep| {
            let out = by_id
                .get(ep.episode_id.as_str())
                .ok_or_else(|| Error::Domain(format!("no output for episode {}", ep.episode_id)))?;
            let ranking = match (&out.raw_text, &out.ranking) {
                (Some(raw), None) => parse_output(raw, ep.n()).ranking,
                (None, Some(r)) => {
                    validate_permutation(r, ep.n())?;
                    Some(r.clone())
                }
                _ => {
                    return Err(Error::Format(format!(
                        "output for {} needs exactly one of raw_text or ranking",
                        ep.episode_id
                    )))
                }
            };
            let parsed = ranking.is_some();
            Ok((ranking.unwrap_or_else(|| (0..ep.n()).collect()), parsed))
        })
        .collect::<Result<_>>()?;
    let parsed = rows.iter().filter(|r| r.1).count();
    let pre: Vec<(Vec<usize>, usize)> = episodes
        .iter()
        .map(|ep| ((0..ep.n()).collect(), ep.pre_rank_position - 1))
        .collect();
    let re: Vec<(Vec<usize>, usize)> = episodes
        .iter()
        .zip(rows)
        .map(|(ep, (ranking, _))| (ranking, ep.pre_rank_position - 1))
        .collect();
    let shortest = episodes.iter().map(RerankEpisode::n).min().unwrap_or(0);
    Ok(EvalReport {
        ks: ks.to_vec(),
        episodes: episodes.len(),
        parsed,
        parse_failures: episodes.len() - parsed,
        truncated_ks: ks.iter().copied().filter(|&k| k > shortest).collect(),
        rows: vec![metric_row("retriever", &pre, ks)?, metric_row(method, &re, ks)?],
    })
}

impl EvalReport {
    fn columns(&self) -> Vec<String> {
        [Metric::Recall, Metric::Ndcg]
            .iter()
            .flat_map(|m| self.ks.iter().map(move |&k| m.label(k)))
            .collect()
    }

    /// Aligned table: one row per method, one column per metric@K.
    pub fn to_table(&self) -> String {
        let cols = self.columns();
        let width = self
            .rows
            .iter()
            .map(|r| r.method.len())
            .chain(["method".len()])
            .max()
            .unwrap_or(6);
        let mut out = format!("{:<width$}", "method");
        for c in &cols {
            let _ = write!(out, "  {c:>10}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:<width$}", row.method);
            for c in &cols {
                let _ = write!(out, "  {:>10.4}", row.metrics.get(c).copied().unwrap_or(f64::NAN));
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "episodes: {}, parsed: {}, parse failures: {}",
            self.episodes, self.parsed, self.parse_failures
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let cols = self.columns();
        let mut out = format!("method,{}\n", cols.join(","));
        for row in &self.rows {
            let vals: Vec<String> = cols
                .iter()
                .map(|c| row.metrics.get(c).map_or(String::new(), |v| format!("{v}")))
                .collect();
            let _ = writeln!(out, "{},{}", row.method, vals.join(","));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{leave_one_out_split, Event};

    #[test]
    fn metric_spot_values() {
        let list = [1, 2, 3, 4, 5];
        assert_eq!(recall_at_k(&list, &1, 5).unwrap(), 1.0);
        assert_eq!(recall_at_k(&list, &9, 5).unwrap(), 0.0);
        assert_eq!(ndcg_at_k(&list, &1, 5).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&list, &3, 3).unwrap(), 0.5);
        assert!((ndcg_at_k(&list, &2, 5).unwrap() - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&list, &3, 2).unwrap(), 0.0);
        assert_eq!(recall_at_k(&list, &5, 50).unwrap(), 1.0);
        assert!(recall_at_k(&list, &1, 0).is_err());
    }

    fn log(seqs: &[(&str, &[&str])]) -> InteractionLog {
        InteractionLog::from_events(seqs.iter().flat_map(|(u, items)| {
            items.iter().enumerate().map(move |(t, i)| Event {
                user_id: u.to_string(),
                item_id: i.to_string(),
                timestamp: t as i64,
            })
        }))
        .unwrap()
    }

    #[test]
    fn markov_basics() {
        let train = log(&[("u1", &["a", "b", "c"]), ("u2", &["a", "b", "d"]), ("u3", &["c", "c"])]);
        let m = MarkovRetriever::fit(&train, 1.0).unwrap();
        assert_eq!(m.predict(&["a".into()], 1), vec!["b"]);
        assert_eq!(m.transition_count("a", "b"), 2);
        assert_eq!(m.transition_count("c", "c"), 1);
        // Popularity: c=3, a=2, b=2, d=1.
        assert_eq!(m.predict(&[], 4), vec!["c", "a", "b", "d"]);
        assert_eq!(m.predict(&["zzz".into()], 2), vec!["c", "a"]);
        assert_eq!(m.predict(&["d".into()], 2), vec!["c", "a"]);
    }

    #[test]
    fn episodes_and_report() {
        let seqs: Vec<(String, Vec<String>)> = (0..6)
            .map(|u| {
                let cycle = ["a", "b", "c", "d", "e"];
                (format!("u{u}"), (0..5).map(|t| cycle[(u + t) % 5].to_string()).collect())
            })
            .collect();
        let events = seqs.iter().flat_map(|(u, items)| {
            items.iter().enumerate().map(move |(t, i)| Event {
                user_id: u.clone(),
                item_id: i.clone(),
                timestamp: t as i64,
            })
        });
        let split = leave_one_out_split(&InteractionLog::from_events(events).unwrap()).unwrap();
        let m = MarkovRetriever::fit(&split.train_log(), 1.0).unwrap();
        let built = build_episodes(&split, &m, 3, EvalSplit::Test).unwrap();
        assert_eq!(built.episodes.len() + built.skipped, 6);
        assert!(!built.episodes.is_empty());
        let eps = built.episodes;
        // Outputs that copy the pre-rank give identical rows.
        let copy: Vec<EpisodeOutput> = eps
            .iter()
            .map(|e| EpisodeOutput {
                episode_id: e.episode_id.clone(),
                raw_text: None,
                ranking: Some((0..e.n()).collect()),
            })
            .collect();
        let rep = evaluate_rerank(&eps, &copy, &[1, 3], "copy").unwrap();
        assert_eq!(rep.rows[0].metrics, rep.rows[1].metrics);
        let promote: Vec<EpisodeOutput> = eps
            .iter()
            .map(|e| EpisodeOutput {
                episode_id: e.episode_id.clone(),
                raw_text: Some(format!("Prediction: Candidate {}", e.pre_rank_position)),
                ranking: None,
            })
            .collect();
        let rep = evaluate_rerank(&eps, &promote, &[1, 9], "oracle").unwrap();
        assert_eq!(rep.rows[1].metrics["recall@1"], 1.0);
        assert_eq!(rep.truncated_ks, vec![9]);
        assert!(rep.to_table().contains("recall@1"));
        assert!(rep.to_csv().starts_with("method,recall@1,recall@9,ndcg@1,ndcg@9\n"));
        assert!(evaluate_rerank(&eps, &promote[1..], &[1], "x").is_err());
    }

    #[test]
    fn fallback_counts() {
        let ep = RerankEpisode::new("e", vec![], vec!["a".into(), "b".into()], "b").unwrap();
        let out = EpisodeOutput {
            episode_id: "e".into(),
            raw_text: Some("garbage".into()),
            ranking: None,
        };
        let rep = evaluate_rerank(&[ep], &[out], &[1], "m").unwrap();
        assert_eq!((rep.parsed, rep.parse_failures), (0, 1));
        assert_eq!(rep.rows[1].metrics["recall@1"], 0.0);
    }
}
