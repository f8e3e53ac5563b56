//! Top-K ranking metrics with train-item masking, sparsity-group breakdown,
//! the uniformity diagnostic, and report output.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{InteractionDataset, SparsityGroup, SparsityGroups};
use crate::exec::Execution;
use crate::matrix::{norm, Matrix};
use crate::model::{score_all_items, EmbeddingState};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no user has held-out items")]
    NoEvaluableUsers,
    #[error("cutoff K={k} must be between 1 and the number of items ({items})")]
    InvalidCutoff { k: usize, items: usize },
    #[error("embedding tables ({users} x {items}) do not match the dataset ({ds_users} x {ds_items})")]
    ShapeMismatch {
        users: usize,
        items: usize,
        ds_users: usize,
        ds_items: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Top `k` item ids by descending score, ties broken by ascending id.
/// Items listed in `masked` (sorted) are never returned.
pub fn topk_ranking(scores: &[f64], masked: &[u32], k: usize) -> Vec<u32> {
    let mut cand: Vec<u32> = (0..scores.len() as u32)
        .filter(|i| masked.binary_search(i).is_err())
        .collect();
    let order = |a: &u32, b: &u32| {
        scores[*b as usize]
            .total_cmp(&scores[*a as usize])
            .then(a.cmp(b))
    };
    let k = k.min(cand.len());
    if k == 0 {
        return Vec::new();
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, order);
        cand.truncate(k);
    }
    cand.sort_unstable_by(order);
    cand
}

/// Ranking for user `u` with its train items masked.
pub fn topk_for_user(u: usize, emb: &EmbeddingState, ds: &InteractionDataset, k: usize) -> Vec<u32> {
    topk_ranking(&score_all_items(u, emb), ds.user_neighbors(u), k)
}

fn hits<'a>(ranked: &'a [u32], test_items: &'a [u32], k: usize) -> impl Iterator<Item = usize> + 'a {
    let test_items = test_items.to_vec();
    ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(move |(_, i)| test_items.binary_search(i).is_ok())
        .map(|(r, _)| r)
}

/// `|top-K ∩ test| / |test|`. `test_items` must be sorted and non-empty.
pub fn recall_at_k(ranked: &[u32], test_items: &[u32], k: usize) -> f64 {
    if test_items.is_empty() {
        return 0.0;
    }
    hits(ranked, test_items, k).count() as f64 / test_items.len() as f64
}

/// Binary-gain DCG over the first `k` ranks, normalized by the ideal DCG of
/// `min(|test|, k)` hits. `test_items` must be sorted and non-empty.
pub fn ndcg_at_k(ranked: &[u32], test_items: &[u32], k: usize) -> f64 {
    if test_items.is_empty() {
        return 0.0;
    }
    let gain = |r: usize| 1.0 / ((r + 2) as f64).log2();
    let dcg: f64 = hits(ranked, test_items, k).map(gain).sum();
    let idcg: f64 = (0..test_items.len().min(k)).map(gain).sum();
    dcg / idcg
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub users: usize,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

/// Macro-averaged metrics over evaluable users.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub per_group: BTreeMap<SparsityGroup, GroupMetrics>,
    pub users_evaluated: usize,
    pub wall_time_per_epoch: Option<f64>,
    pub eval_seconds: f64,
}

impl EvalReport {
    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn recall_at(&self, k: usize) -> f64 {
        self.recall.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// Long-format rows `(group, K, metric, value)`; overall rows use group
    /// `all`.
    pub fn long_rows(&self) -> Vec<(String, usize, &'static str, f64)> {
        let mut out = Vec::new();
        let mut push = |g: &str, rec: &BTreeMap<usize, f64>, nd: &BTreeMap<usize, f64>| {
            for (&k, &v) in rec {
                out.push((g.to_owned(), k, "recall", v));
            }
            for (&k, &v) in nd {
                out.push((g.to_owned(), k, "ndcg", v));
            }
        };
        push("all", &self.recall, &self.ndcg);
        for (g, m) in &self.per_group {
            push(g.as_str(), &m.recall, &m.ndcg);
        }
        out
    }

    /// Human-readable summary table.
    pub fn summary_table(&self) -> String {
        let mut s = String::from("group      users");
        for k in self.recall.keys() {
            s.push_str(&format!("   R@{k:<4}  N@{k:<4}"));
        }
        s.push('\n');
        let mut line = |name: &str, users: usize, r: &BTreeMap<usize, f64>, n: &BTreeMap<usize, f64>| {
            s.push_str(&format!("{name:<9} {users:>6}"));
            for k in r.keys() {
                s.push_str(&format!("  {:.4}  {:.4}", r[k], n[k]));
            }
            s.push('\n');
        };
        line("all", self.users_evaluated, &self.recall, &self.ndcg);
        for (g, m) in &self.per_group {
            line(g.as_str(), m.users, &m.recall, &m.ndcg);
        }
        s
    }
}

/// Write `config<TAB>group<TAB>K<TAB>metric<TAB>value` rows, with a header.
pub fn write_long_format(path: &Path, rows: &[(String, &EvalReport)]) -> Result<(), EvalError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "config\tgroup\tk\tmetric\tvalue")?;
    for (config, report) in rows {
        for (g, k, metric, v) in report.long_rows() {
            writeln!(out, "{config}\t{g}\t{k}\t{metric}\t{v:.6}")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Evaluate every user with held-out items at each cutoff in `ks`.
/// Train items are masked; metrics are averaged per user, then over users,
/// and additionally per sparsity group when `groups` is given.
pub fn evaluate(
    emb: &EmbeddingState,
    ds: &InteractionDataset,
    ks: &[usize],
    groups: Option<&SparsityGroups>,
    exec: Execution,
) -> Result<EvalReport, EvalError> {
    if emb.num_users() != ds.num_users() || emb.num_items() != ds.num_items() {
        return Err(EvalError::ShapeMismatch {
            users: emb.num_users(),
            items: emb.num_items(),
            ds_users: ds.num_users(),
            ds_items: ds.num_items(),
        });
    }
    for &k in ks {
        if k == 0 || k > ds.num_items() {
            return Err(EvalError::InvalidCutoff {
                k,
                items: ds.num_items(),
            });
        }
    }
    let start = Instant::now();
    let users = ds.evaluable_users();
    if users.is_empty() {
        return Err(EvalError::NoEvaluableUsers);
    }
    let kmax = ks.iter().copied().max().unwrap_or(20);
    let per_user: Vec<(Vec<f64>, Vec<f64>)> = exec.map(users.len(), |idx| {
        let u = users[idx];
        let ranked = topk_for_user(u, emb, ds, kmax);
        let test = ds.test_items(u);
        (
            ks.iter().map(|&k| recall_at_k(&ranked, test, k)).collect(),
            ks.iter().map(|&k| ndcg_at_k(&ranked, test, k)).collect(),
        )
    });

    let mut report = EvalReport {
        users_evaluated: users.len(),
        ..Default::default()
    };
    let mut sums: BTreeMap<Option<SparsityGroup>, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (idx, (r, n)) in per_user.iter().enumerate() {
        let mut keys = vec![None];
        if let Some(g) = groups {
            keys.push(Some(g.labels[users[idx]]));
        }
        for key in keys {
            let e = sums
                .entry(key)
                .or_insert_with(|| (0, vec![0.0; ks.len()], vec![0.0; ks.len()]));
            e.0 += 1;
            for k in 0..ks.len() {
                e.1[k] += r[k];
                e.2[k] += n[k];
            }
        }
    }
    for (key, (count, r, n)) in sums {
        let avg = |v: &[f64]| -> BTreeMap<usize, f64> {
            ks.iter()
                .zip(v)
                .map(|(&k, s)| (k, s / count as f64))
                .collect()
        };
        match key {
            None => {
                report.recall = avg(&r);
                report.ndcg = avg(&n);
            }
            Some(g) => {
                report.per_group.insert(
                    g,
                    GroupMetrics {
                        users: count,
                        recall: avg(&r),
                        ndcg: avg(&n),
                    },
                );
            }
        }
    }
    report.eval_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// `log mean exp(−2‖x̂ − ŷ‖²)` over all pairs of up to `sample_size`
/// sampled rows, each normalized to unit length. Zero rows are skipped.
pub fn uniformity_diagnostic(rows: &Matrix, sample_size: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rows.rows();
    let take = sample_size.min(n);
    let mut idx: Vec<usize> = sample(&mut rng, n, take).into_vec();
    idx.sort_unstable();
    let unit: Vec<Vec<f64>> = idx
        .iter()
        .filter_map(|&r| {
            let v = rows.row(r);
            let nv = norm(v);
            (nv > 0.0).then(|| v.iter().map(|x| x / nv).collect())
        })
        .collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for a in 0..unit.len() {
        for b in a + 1..unit.len() {
            let d2: f64 = unit[a].iter().zip(&unit[b]).map(|(x, y)| (x - y) * (x - y)).sum();
            total += (-2.0 * d2).exp();
            pairs += 1;
        }
    }
    if pairs == 0 {
        return 0.0;
    }
    (total / pairs as f64).ln()
}

/// `(clean − noisy) / clean`.
pub fn relative_degradation(clean: f64, noisy: f64) -> f64 {
    (clean - noisy) / clean
}
