use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semrank_core::corpus::{Event, InteractionLog};
use semrank_core::evalkit::{evaluate_rerank, mean_metric, ndcg_at_k, recall_at_k, Metric};
use semrank_core::{EpisodeOutput, MarkovRetriever, RerankEpisode};

/// Per-user brute force: scan the first `k` entries for the target.
fn oracle(lists: &[(Vec<u32>, u32)], k: usize) -> (f64, f64) {
    let mut recall = 0.0;
    let mut ndcg = 0.0;
    for (ranked, target) in lists {
        for (j, item) in ranked.iter().enumerate() {
            if j >= k {
                break;
            }
            if item == target {
                recall += 1.0;
                ndcg += 1.0 / ((j + 2) as f64).log2();
                break;
            }
        }
    }
    (recall / lists.len() as f64, ndcg / lists.len() as f64)
}

#[test]
fn metrics_match_brute_force_on_random_users() {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let lists: Vec<(Vec<u32>, u32)> = (0..500)
        .map(|_| {
            let mut pool: Vec<u32> = (0..40).collect();
            pool.shuffle(&mut rng);
            let len = rng.random_range(1..=20);
            (pool[..len].to_vec(), rng.random_range(0..40))
        })
        .collect();
    for k in [1, 3, 5, 9, 10, 20, 25] {
        let (r, n) = oracle(&lists, k);
        assert_eq!(mean_metric(Metric::Recall, &lists, k).unwrap(), r, "recall@{k}");
        assert_eq!(mean_metric(Metric::Ndcg, &lists, k).unwrap(), n, "ndcg@{k}");
    }
}

#[test]
fn closed_form_spot_values() {
    let list = ["a", "b", "c", "d"];
    assert_eq!(ndcg_at_k(&list, &"a", 5).unwrap(), 1.0);
    assert_eq!(ndcg_at_k(&list, &"c", 3).unwrap(), 0.5);
    assert!((ndcg_at_k(&list, &"b", 2).unwrap() - 0.630_929_753_571_457_4).abs() < 1e-15);
    assert_eq!(ndcg_at_k(&list, &"c", 2).unwrap(), 0.0);
    assert_eq!(recall_at_k(&list, &"a", 5).unwrap(), 1.0);
    assert_eq!(recall_at_k(&list, &"z", 4).unwrap(), 0.0);
    assert!(recall_at_k(&list, &"a", 0).is_err());
}

#[test]
fn monotone_in_k_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let mut list: Vec<u32> = (0..12).collect();
        list.shuffle(&mut rng);
        let t = rng.random_range(0..14);
        let mut prev = (0.0, 0.0);
        for k in 1..=12 {
            let r = recall_at_k(&list, &t, k).unwrap();
            let n = ndcg_at_k(&list, &t, k).unwrap();
            assert!(r >= prev.0 && n >= prev.1);
            assert!(n <= r && n >= r / ((k + 1) as f64).log2() - 1e-15);
            prev = (r, n);
        }
    }
}

#[test]
fn evaluation_matches_per_user_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut episodes = Vec::new();
    let mut outputs = Vec::new();
    let mut want_pre = Vec::new();
    let mut want_re = Vec::new();
    for u in 0..300 {
        let cands: Vec<String> = (0..10).map(|i| format!("u{u}c{i}")).collect();
        let t = rng.random_range(0..10);
        let ep = RerankEpisode::new(format!("u{u}"), vec!["h".into()], cands, format!("u{u}c{t}")).unwrap();
        let (out, used) = match u % 3 {
            0 => {
                let mut r: Vec<usize> = (0..10).collect();
                r.shuffle(&mut rng);
                (
                    EpisodeOutput { episode_id: ep.episode_id.clone(), raw_text: None, ranking: Some(r.clone()) },
                    r,
                )
            }
            1 => (
                EpisodeOutput {
                    episode_id: ep.episode_id.clone(),
                    raw_text: Some("Prediction: Candidate 10".into()),
                    ranking: None,
                },
                std::iter::once(9).chain(0..9).collect(),
            ),
            _ => (
                EpisodeOutput { episode_id: ep.episode_id.clone(), raw_text: Some("no idea".into()), ranking: None },
                (0..10).collect(),
            ),
        };
        want_pre.push(((0..10).collect::<Vec<usize>>(), t));
        want_re.push((used, t));
        episodes.push(ep);
        outputs.push(out);
    }
    outputs.reverse();
    let ks = [1, 5, 9, 10];
    let rep = evaluate_rerank(&episodes, &outputs, &ks, "m").unwrap();
    assert_eq!((rep.parsed, rep.parse_failures), (200, 100));
    for &k in &ks {
        for (row, lists) in [(&rep.rows[0], &want_pre), (&rep.rows[1], &want_re)] {
            let lists: Vec<(Vec<u32>, u32)> = lists
                .iter()
                .map(|(r, t)| (r.iter().map(|&x| x as u32).collect(), *t as u32))
                .collect();
            let (r, n) = oracle(&lists, k);
            assert_eq!(row.metrics[&format!("recall@{k}")], r);
            assert_eq!(row.metrics[&format!("ndcg@{k}")], n);
        }
    }
}

#[test]
fn markov_counts_match_hand_count() {
    // Chain a -> b -> c -> d -> e, repeated by three users, plus one a -> c.
    let mut events = Vec::new();
    for (u, seq) in [
        vec!["a", "b", "c", "d", "e"],
        vec!["a", "b", "c", "d", "e"],
        vec!["b", "c", "d"],
        vec!["a", "c"],
    ]
    .iter()
    .enumerate()
    {
        for (t, item) in seq.iter().enumerate() {
            events.push(Event { user_id: format!("u{u}"), item_id: item.to_string(), timestamp: t as i64 });
        }
    }
    let log = InteractionLog::from_events(events).unwrap();
    let m = MarkovRetriever::fit(&log, 1.0).unwrap();
    let mut counted: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for seq in log.users().values() {
        for w in seq.windows(2) {
            *counted.entry((w[0].item_id.as_str(), w[1].item_id.as_str())).or_default() += 1;
        }
    }
    for a in ["a", "b", "c", "d", "e"] {
        for b in ["a", "b", "c", "d", "e"] {
            assert_eq!(m.transition_count(a, b), counted.get(&(a, b)).copied().unwrap_or(0));
        }
    }
    assert_eq!(m.predict(&["a".into()], 1), vec!["b".to_string()]);
    assert_eq!(m.predict(&["d".into()], 1), vec!["e".to_string()]);
}
