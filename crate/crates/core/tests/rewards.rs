use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use semrank_core::reward::{
    conditional_reward, dapo_objective, dynamic_sampling_filter, group_advantages, score_batch,
    PolicyGroup, ScoredOutputInput, ScoringInput,
};
use semrank_core::{Error, RewardConfig};

#[test]
fn conditional_gate_cases() {
    let alpha = 0.1;
    // Target promoted: format reward added.
    assert_eq!(conditional_reward(0.3, 1, 4, alpha), 0.3 + alpha);
    assert_eq!(conditional_reward(0.3, 0, 4, alpha), 0.3);
    // Target already first and kept first: format reward added.
    assert_eq!(conditional_reward(0.0, 1, 1, alpha), alpha);
    // Otherwise the ranking reward alone.
    assert_eq!(conditional_reward(0.0, 1, 4, alpha), 0.0);
    assert_eq!(conditional_reward(-0.5, 1, 6, alpha), -0.5);
    assert_eq!(conditional_reward(-0.2, 1, 1, alpha), -0.2 + alpha);
}

#[test]
fn one_hot_advantage_is_sqrt_g_minus_one() {
    for g in [2usize, 4, 8, 16] {
        let mut r = vec![0.0; g];
        r[0] = 1.0;
        let a = group_advantages(&r).unwrap();
        let want = ((g - 1) as f64).sqrt();
        assert!((a[0] - want).abs() < 1e-9, "G={g}: {}", a[0]);
        for x in &a[1..] {
            assert!((x + 1.0 / want).abs() < 1e-9);
        }
    }
}

#[test]
fn objective_at_old_policy_is_token_weighted_mean_advantage() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let cfg = RewardConfig::default();
    for _ in 0..20 {
        let groups: Vec<PolicyGroup> = (0..rng.random_range(1..5))
            .map(|_| {
                let g = 8;
                let rewards: Vec<f64> = (0..g).map(|_| rng.random_range(-1.0..1.0)).collect();
                let advantages = group_advantages(&rewards).unwrap();
                let ratios = (0..g)
                    .map(|_| vec![1.0; rng.random_range(1..50)])
                    .collect();
                PolicyGroup { advantages, ratios }
            })
            .collect();
        let mut num = 0.0;
        let mut den = 0.0;
        for grp in &groups {
            for (a, r) in grp.advantages.iter().zip(&grp.ratios) {
                num += a * r.len() as f64;
                den += r.len() as f64;
            }
        }
        let got = dapo_objective(&groups, &cfg).unwrap();
        assert!((got - num / den).abs() <= 1e-12, "{got} vs {}", num / den);
    }
}

#[test]
fn equal_reward_groups_are_filtered() {
    let groups = vec![vec![0.2; 4], vec![0.0, 1.0, 0.0, 0.0], vec![-0.3; 4]];
    let kept = dynamic_sampling_filter(groups);
    assert_eq!(kept, vec![vec![0.0, 1.0, 0.0, 0.0]]);
    assert!(matches!(group_advantages(&[0.5; 8]), Err(Error::DegenerateGroup(8))));

    let out = |ranking: Vec<usize>| ScoredOutputInput {
        raw_text: None,
        ranking: Some(ranking),
        token_logprobs_old: vec![-1.0; 3],
        token_logprobs_new: vec![-1.0; 3],
    };
    let cfg = RewardConfig {
        group_size: 2,
        ..Default::default()
    };
    let same = ScoringInput {
        episode_id: "same".into(),
        pre_rank: 2,
        n: 3,
        outputs: vec![out(vec![1, 0, 2]), out(vec![1, 0, 2])],
    };
    let varied = ScoringInput {
        episode_id: "varied".into(),
        pre_rank: 2,
        n: 3,
        outputs: vec![out(vec![1, 0, 2]), out(vec![0, 1, 2])],
    };
    let batch = score_batch(&[same, varied], &cfg).unwrap();
    assert_eq!((batch.kept_groups, batch.dropped_groups), (1, 1));
    assert!(!batch.groups[0].kept && batch.groups[1].kept);
    // Ratios are all 1, so the objective is the mean advantage, which is 0.
    assert!(batch.objective.unwrap().abs() < 1e-12);
    let r = &batch.groups[1].rewards;
    assert!((r[0].r_rank - 1.0 / 3.0).abs() < 1e-12);
    assert_eq!(r[1].r_rank, 0.0);
}
