//! Invariants of the contrastive losses and of plain gradient descent.

use lightccf::dataset::split_per_user;
use lightccf::evaluator::uniformity_diagnostic;
use lightccf::gradients::{cl_ui_grad, user_item_gd_step};
use lightccf::losses::{
    bpr_batch_loss, cl_ss_loss, cl_ui_loss, infonce, na_loss, na_term, LossConfig, PositivePairSet,
};
use lightccf::matrix::{dot, Matrix};
use lightccf::model::{init_xavier, EmbeddingState, SimilarityKind};
use lightccf::sampler::{epoch_batches, Batch};
use lightccf::synthetic::{generate, SyntheticConfig};
use lightccf::Execution;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EX: Execution = Execution::Sequential;

fn pairs_strategy() -> impl Strategy<Value = (Vec<(usize, usize)>, Vec<usize>, u64)> {
    (prop::collection::vec((0usize..8, 0usize..10, 0usize..10), 2..20), 0u64..1000).prop_map(|(t, seed)| {
        let mut pairs: Vec<(usize, usize)> = t.iter().map(|x| (x.0, x.1)).collect();
        if pairs.iter().all(|p| p.0 == pairs[0].0) {
            pairs[1].0 = (pairs[0].0 + 1) % 8;
        }
        (pairs, t.iter().map(|x| x.2).collect(), seed)
    })
}

fn batch_of(pairs: &[(usize, usize)], negs: &[usize]) -> Batch {
    Batch {
        users: pairs.iter().map(|p| p.0 as u32).collect(),
        pos_items: pairs.iter().map(|p| p.1 as u32).collect(),
        neg_items: negs.iter().map(|&j| j as u32).collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn losses_ignore_batch_order((pairs, negs, seed) in pairs_strategy(), tau in 0.05f64..1.0) {
        let emb = init_xavier(8, 10, 6, seed);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let p2: Vec<_> = order.iter().map(|&k| pairs[k]).collect();
        let n2: Vec<_> = order.iter().map(|&k| negs[k]).collect();
        let cfg = LossConfig { tau, ..Default::default() };
        let (a, b) = (PositivePairSet::new(pairs.clone()), PositivePairSet::new(p2.clone()));
        let close = |x: f64, y: f64| (x - y).abs() < 1e-12 * (1.0 + x.abs());
        prop_assert!(close(na_loss(&a, &emb, &cfg, EX).unwrap(), na_loss(&b, &emb, &cfg, EX).unwrap()));
        prop_assert!(close(
            cl_ui_loss(&a, &emb, tau, SimilarityKind::Cosine, EX).unwrap(),
            cl_ui_loss(&b, &emb, tau, SimilarityKind::Cosine, EX).unwrap()
        ));
        let users = |p: &[(usize, usize)]| p.iter().map(|x| x.0).collect::<Vec<_>>();
        let items = |p: &[(usize, usize)]| p.iter().map(|x| x.1).collect::<Vec<_>>();
        prop_assert!(close(
            cl_ss_loss(&users(&pairs), &items(&pairs), &emb, tau, SimilarityKind::Cosine, EX).unwrap(),
            cl_ss_loss(&users(&p2), &items(&p2), &emb, tau, SimilarityKind::Cosine, EX).unwrap()
        ));
        prop_assert!(close(
            bpr_batch_loss(&batch_of(&pairs, &negs), &emb).unwrap(),
            bpr_batch_loss(&batch_of(&p2, &n2), &emb).unwrap()
        ));
    }

    /// The stabilized form agrees with the textbook `-log(e^pos / Σ e^neg)`
    /// wherever the latter is representable.
    #[test]
    fn stabilized_matches_naive(
        anchor in prop::collection::vec(-1.0f64..1.0, 4),
        pos in prop::collection::vec(-1.0f64..1.0, 4),
        negs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..10),
        tau in 0.05f64..2.0,
    ) {
        let neg_refs: Vec<&[f64]> = negs.iter().map(|v| v.as_slice()).collect();
        let got = na_term(&anchor, &pos, &neg_refs, tau, SimilarityKind::Dot).unwrap();
        let num = (dot(&anchor, &pos) / tau).exp();
        let den: f64 = negs.iter().map(|k| (dot(&anchor, k) / tau).exp()).sum();
        let naive = -(num / den).ln();
        prop_assert!((got - naive).abs() < 1e-9 * (1.0 + naive.abs()), "{got} vs {naive}");
        prop_assert_eq!(got, infonce(&anchor, &pos, &neg_refs, tau, SimilarityKind::Dot).unwrap());
    }
}

#[test]
fn stabilized_survives_overflow() {
    let a = [30.0, 0.0];
    let p = [30.0, 0.0];
    let n = [29.0, 1.0];
    let negs: Vec<&[f64]> = vec![&n, &p];
    let tau = 0.01;
    let naive = -((dot(&a, &p) / tau).exp() / ((dot(&a, &n) / tau).exp() + (dot(&a, &p) / tau).exp())).ln();
    assert!(!naive.is_finite());
    let got = na_term(&a, &p, &negs, tau, SimilarityKind::Dot).unwrap();
    assert!(got.is_finite() && got >= 0.0 && got < 1e-10, "{got}");
}

/// Starting from a near-collapsed table, descent on the user-item loss
/// spreads the rows out over 20 epochs.
#[test]
fn user_item_training_spreads_rows() {
    let ds = split_per_user(&generate(&SyntheticConfig::tiny(21)), 0.8, 21).unwrap();
    let d = 8;
    let noise = init_xavier(ds.num_users(), ds.num_items(), d, 21);
    let collapse = |m: &Matrix| {
        let mut out = Matrix::zeros(m.rows(), d);
        for r in 0..m.rows() {
            for k in 0..d {
                out[(r, k)] = if k == 0 { 1.0 } else { 0.0 } + 0.1 * m[(r, k)];
            }
        }
        out
    };
    let mut emb = EmbeddingState::new(collapse(&noise.users), collapse(&noise.items));
    let before = uniformity_diagnostic(&emb.stacked(), 500, 1);
    let mut trajectory = vec![before];
    for epoch in 0..20 {
        for batch in epoch_batches(&ds, 64, 21, epoch).unwrap() {
            let pairs = PositivePairSet::from_batch(&batch.unwrap());
            let g = cl_ui_grad(&pairs, &emb, 0.2, SimilarityKind::Cosine, EX).unwrap();
            g.add_into(&mut emb, -0.5);
        }
        trajectory.push(uniformity_diagnostic(&emb.stacked(), 500, 1));
    }
    // Alignment dominates the first epoch; from the second on the
    // diagnostic falls monotonically.
    for w in trajectory[1..].windows(2) {
        assert!(w[1] <= w[0], "{trajectory:?}");
    }
    let after = *trajectory.last().unwrap();
    assert!(before - after > 0.5, "expected a visible spread: {trajectory:?}");
}

/// Two users, two items: ten synchronous steps against a direct
/// transcription of the update with naive exponentials.
#[test]
fn four_node_descent_trajectory() {
    let tau = 0.5;
    let eta = 0.1;
    let mut emb = EmbeddingState::new(
        Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
        Matrix::from_rows(&[vec![0.6, 0.8], vec![-0.8, 0.6]]),
    );
    let pairs = PositivePairSet::new(vec![(0, 0), (1, 1)]);
    let mut users = [[1.0f64, 0.0], [0.0, 1.0]];
    let items = [[0.6f64, 0.8], [-0.8, 0.6]];
    let loss = |u: &[[f64; 2]; 2]| -> f64 {
        (0..2)
            .map(|a| {
                let s = |k: usize| (u[a][0] * items[k][0] + u[a][1] * items[k][1]) / tau;
                -(s(a).exp() / (s(0).exp() + s(1).exp())).ln()
            })
            .sum()
    };
    let mut prev = loss(&users);
    for _ in 0..10 {
        let mut next = users;
        for a in 0..2 {
            let s: Vec<f64> = (0..2).map(|k| (users[a][0] * items[k][0] + users[a][1] * items[k][1]) / tau).collect();
            let z = s[0].exp() + s[1].exp();
            for c in 0..2 {
                let expect = (s[0].exp() * items[0][c] + s[1].exp() * items[1][c]) / z;
                next[a][c] += eta / tau * (items[a][c] - expect);
            }
        }
        users = next;
        emb.users = user_item_gd_step(&emb, &pairs, tau, eta).unwrap();
        for a in 0..2 {
            for c in 0..2 {
                assert!((emb.users[(a, c)] - users[a][c]).abs() < 1e-12);
            }
        }
        let now = loss(&users);
        assert!(now < prev);
        prev = now;
    }
}
