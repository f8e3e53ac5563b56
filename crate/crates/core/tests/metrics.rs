//! Ranking metrics against brute-force oracles.

use lightccf::dataset::{sparsity_groups, split_per_user, InteractionDataset};
use lightccf::evaluator::{evaluate, ndcg_at_k, recall_at_k, topk_for_user, topk_ranking};
use lightccf::model::init_xavier;
use lightccf::synthetic::{generate, SyntheticConfig};
use lightccf::Execution;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn permutations(items: &[u32]) -> Vec<Vec<u32>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for (i, &head) in items.iter().enumerate() {
        let mut rest = items.to_vec();
        rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

fn dcg(ranked: &[u32], relevant: &[u32], k: usize) -> f64 {
    ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).ln() * std::f64::consts::LN_2)
        .sum()
}

fn tiny_ds() -> InteractionDataset {
    split_per_user(&generate(&SyntheticConfig::tiny(11)), 0.7, 11).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    /// NDCG equals DCG over the best DCG of any ordering of the catalogue.
    #[test]
    fn ndcg_matches_exhaustive_ideal(n in 1usize..=6, seed in 0u64..10_000, k in 1usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<u32> = (0..n as u32).collect();
        let mut ranked = items.clone();
        ranked.shuffle(&mut rng);
        let t = rng.gen_range(1..=n);
        let mut test: Vec<u32> = items.choose_multiple(&mut rng, t).copied().collect();
        test.sort_unstable();
        let ideal = permutations(&items).iter().map(|p| dcg(p, &test, k)).fold(0.0, f64::max);
        let want = dcg(&ranked, &test, k) / ideal;
        let got = ndcg_at_k(&ranked, &test, k);
        prop_assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        prop_assert!((0.0..=1.0 + 1e-12).contains(&got));
    }

    #[test]
    fn recall_and_dcg_are_monotone_in_k(scores in prop::collection::vec(-5.0f64..5.0, 2..60), seed in 0u64..1000) {
        let n = scores.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut test: Vec<u32> = (0..n as u32).collect::<Vec<_>>().choose_multiple(&mut rng, 1 + n / 4).copied().collect();
        test.sort_unstable();
        let ranked = topk_ranking(&scores, &[], n);
        let (mut prev, mut prev_dcg) = (0.0, 0.0);
        for k in 1..=n {
            let r = recall_at_k(&ranked, &test, k);
            prop_assert!(r + 1e-15 >= prev);
            prev = r;
            let g = dcg(&ranked, &test, k);
            prop_assert!(g + 1e-15 >= prev_dcg);
            prev_dcg = g;
        }
        prop_assert!((prev - 1.0).abs() < 1e-12);
    }

    /// Top-K never contains masked items and agrees with a full sort.
    #[test]
    fn topk_respects_mask(scores in prop::collection::vec(-3i32..3, 1..80), mask_every in 2usize..6, k in 1usize..20) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let masked: Vec<u32> = (0..scores.len() as u32).filter(|i| *i as usize % mask_every == 0).collect();
        let got = topk_ranking(&scores, &masked, k);
        let mut full: Vec<u32> = (0..scores.len() as u32).filter(|i| !masked.contains(i)).collect();
        full.sort_by(|a, b| scores[*b as usize].total_cmp(&scores[*a as usize]).then(a.cmp(b)));
        full.truncate(k);
        prop_assert_eq!(got, full);
    }
}

/// Random scores: recall@K is hypergeometric with mean K/C per user, where
/// C is the number of unmasked candidates.
#[test]
fn chance_recall_matches_hypergeometric_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, k, users) = (400usize, 20usize, 4000usize);
    let mut total = 0.0;
    let mut var = 0.0;
    for _ in 0..users {
        let t = rng.gen_range(1..=30usize);
        let scores: Vec<f64> = (0..c).map(|_| rng.gen()).collect();
        let mut test: Vec<u32> = (0..c as u32).collect::<Vec<_>>().choose_multiple(&mut rng, t).copied().collect();
        test.sort_unstable();
        let ranked = topk_ranking(&scores, &[], k);
        total += recall_at_k(&ranked, &test, k);
        let (cf, kf, tf) = (c as f64, k as f64, t as f64);
        let var_hits = kf * (tf / cf) * (1.0 - tf / cf) * (cf - kf) / (cf - 1.0);
        var += var_hits / (tf * tf);
    }
    let mean = total / users as f64;
    let expected = k as f64 / c as f64;
    let sd = var.sqrt() / users as f64;
    assert!((mean - expected).abs() < 4.0 * sd, "mean {mean} expected {expected} sd {sd}");
}

/// Normalized DCG is not monotone in K: the ideal DCG grows with K too.
#[test]
fn ndcg_can_drop_as_k_grows() {
    let ranked = [0u32, 5, 1];
    let test = [0u32, 1];
    assert_eq!(ndcg_at_k(&ranked, &test, 1), 1.0);
    assert!(ndcg_at_k(&ranked, &test, 2) < 1.0);
}

#[test]
fn evaluate_matches_manual_average() {
    let ds = tiny_ds();
    let emb = init_xavier(ds.num_users(), ds.num_items(), 8, 3);
    let groups = sparsity_groups(&ds, None).unwrap();
    let ks = [5, 10, 20];
    let report = evaluate(&emb, &ds, &ks, Some(&groups), Execution::Sequential).unwrap();
    let users = ds.evaluable_users();
    assert_eq!(report.users_evaluated, users.len());
    for &k in &ks {
        let (mut r, mut n) = (0.0, 0.0);
        for &u in &users {
            let ranked = topk_for_user(u, &emb, &ds, k);
            for i in &ranked {
                assert!(!ds.is_train_edge(u, *i));
            }
            r += recall_at_k(&ranked, ds.test_items(u), k);
            n += ndcg_at_k(&ranked, ds.test_items(u), k);
        }
        assert!((report.recall_at(k) - r / users.len() as f64).abs() < 1e-12);
        assert!((report.ndcg_at(k) - n / users.len() as f64).abs() < 1e-12);
        // Group means weighted by size recover the overall mean.
        let weighted: f64 = report.per_group.values().map(|g| g.ndcg[&k] * g.users as f64).sum();
        assert!((weighted / users.len() as f64 - report.ndcg_at(k)).abs() < 1e-12);
    }
    let par = evaluate(&emb, &ds, &ks, Some(&groups), Execution::default()).unwrap();
    assert_eq!(par.ndcg, report.ndcg);
    assert_eq!(par.per_group, report.per_group);
}

#[test]
fn perfect_scores_give_unit_metrics() {
    let ds = tiny_ds();
    let mut emb = init_xavier(ds.num_users(), ds.num_items(), ds.num_items(), 0);
    // One-hot items, users scoring exactly their test items.
    emb.items = lightccf::Matrix::identity(ds.num_items());
    emb.users = lightccf::Matrix::zeros(ds.num_users(), ds.num_items());
    for u in 0..ds.num_users() {
        for &i in ds.test_items(u) {
            emb.users[(u, i as usize)] = 1.0;
        }
    }
    let report = evaluate(&emb, &ds, &[20], None, Execution::Sequential).unwrap();
    assert!((report.ndcg_at(20) - 1.0).abs() < 1e-12);
    let capped: f64 = ds
        .evaluable_users()
        .iter()
        .map(|&u| (20.0f64).min(ds.test_items(u).len() as f64) / ds.test_items(u).len() as f64)
        .sum::<f64>()
        / report.users_evaluated as f64;
    assert!((report.recall_at(20) - capped).abs() < 1e-12);
}
