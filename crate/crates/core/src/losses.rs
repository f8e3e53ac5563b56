//! Training objectives: InfoNCE and its in-batch variants (self-sample and
//! user-item positives), the neighborhood-aggregation (NA) loss, BPR, and
//! the joint objective.
//!
//! Batch losses are means over their anchors. Contrastive similarities use
//! the configured [`SimilarityKind`]; BPR always scores with the dot product.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::matrix::{dot, log_sum_exp, norm, softplus, Matrix};
use crate::model::{similarity, EmbeddingState, ModelError, SimilarityKind};
use crate::sampler::Batch;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("negative set is empty")]
    EmptyNegatives,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("every pair in the batch belongs to user {0}; NA loss has no negatives")]
    NoNaNegatives(usize),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Which embeddings of the other in-batch pairs act as NA negatives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NaNegatives {
    /// Items of the other users' pairs.
    #[default]
    OtherItems,
    /// Items and users of the other users' pairs.
    OtherItemsAndUsers,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Temperature.
    pub tau: f64,
    /// Weight of the auxiliary (contrastive / NA) term.
    pub alpha: f64,
    /// L2 weight on base embeddings.
    pub beta: f64,
    pub na_negatives: NaNegatives,
    /// Regularize the whole base table instead of batch-touched rows.
    pub regularize_all_rows: bool,
    /// Similarity inside the contrastive terms.
    pub similarity: SimilarityKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            alpha: 1.0,
            beta: 1e-4,
            na_negatives: NaNegatives::OtherItems,
            regularize_all_rows: false,
            similarity: SimilarityKind::Cosine,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(LossError::InvalidTemperature(self.tau));
        }
        Ok(())
    }
}

/// In-batch positive `(user, item)` pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PositivePairSet {
    pub pairs: Vec<(usize, usize)>,
}

impl PositivePairSet {
    pub fn new(pairs: Vec<(usize, usize)>) -> Self {
        Self { pairs }
    }

    pub fn from_batch(batch: &Batch) -> Self {
        Self {
            pairs: batch
                .users
                .iter()
                .zip(&batch.pos_items)
                .map(|(&u, &i)| (u as usize, i as usize))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct items in first-seen order.
    pub fn distinct_items(&self) -> Vec<usize> {
        distinct(self.pairs.iter().map(|p| p.1))
    }

    pub fn distinct_users(&self) -> Vec<usize> {
        distinct(self.pairs.iter().map(|p| p.0))
    }
}

pub(crate) fn distinct(it: impl Iterator<Item = usize>) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    it.filter(|x| seen.insert(*x)).collect()
}

/// `-log( exp(s(a,p)/τ) / Σ_k exp(s(a,k)/τ) )`.
///
/// The positive only enters the denominator if the caller lists it among
/// `negatives`.
pub fn infonce(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    tau: f64,
    kind: SimilarityKind,
) -> Result<f64> {
    na_term(anchor, positive, negatives, tau, kind)
}

/// `-s(a,p)/τ + log Σ_k exp(s(a,k)/τ)`, the per-pair NA form.
pub fn na_term(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    tau: f64,
    kind: SimilarityKind,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(LossError::EmptyNegatives);
    }
    if !(tau > 0.0) {
        return Err(LossError::InvalidTemperature(tau));
    }
    let pos = similarity(anchor, positive, kind)? / tau;
    let logits = negatives
        .iter()
        .map(|k| similarity(anchor, k, kind).map(|s| s / tau))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(log_sum_exp(&logits) - pos)
}

/// Rows prepared for repeated similarity evaluation: unit vectors and norms
/// under cosine, the raw rows (norm 1) under dot.
pub(crate) struct Prepared {
    pub rows: Matrix,
    pub norms: Vec<f64>,
}

impl Prepared {
    pub fn new(table: &Matrix, idx: &[usize], kind: SimilarityKind) -> Result<Self> {
        let mut rows = table.select_rows(idx);
        let mut norms = vec![1.0; idx.len()];
        if kind == SimilarityKind::Cosine {
            for (r, n) in norms.iter_mut().enumerate() {
                let row = rows.row_mut(r);
                *n = norm(row);
                if *n == 0.0 {
                    return Err(ModelError::ZeroVector.into());
                }
                row.iter_mut().for_each(|v| *v /= *n);
            }
        }
        Ok(Self { rows, norms })
    }

    #[inline]
    pub fn sim(&self, a: usize, other: &Prepared, b: usize) -> f64 {
        dot(self.rows.row(a), other.rows.row(b))
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(LossError::InvalidTemperature(tau))
    }
}

/// Mean self-sample InfoNCE over a set of rows: each row is its own
/// positive, all rows of the set form the denominator.
fn self_sample_term(p: &Prepared, tau: f64, exec: Execution) -> f64 {
    let n = p.rows.rows();
    let per = exec.map(n, |a| {
        let logits: Vec<f64> = (0..n).map(|b| p.sim(a, p, b) / tau).collect();
        log_sum_exp(&logits) - p.sim(a, p, a) / tau
    });
    per.iter().sum::<f64>() / n as f64
}

/// Self-sample contrastive loss over the distinct users and distinct items
/// of a batch: mean user-side term plus mean item-side term.
pub fn cl_ss_loss(
    users: &[usize],
    items: &[usize],
    emb: &EmbeddingState,
    tau: f64,
    kind: SimilarityKind,
    exec: Execution,
) -> Result<f64> {
    check_tau(tau)?;
    let users = distinct(users.iter().copied());
    let items = distinct(items.iter().copied());
    if users.is_empty() || items.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if users.len() == 1 && items.len() == 1 {
        log::debug!("self-sample loss on a single user and item is identically zero");
    }
    let pu = Prepared::new(&emb.users, &users, kind)?;
    let pi = Prepared::new(&emb.items, &items, kind)?;
    Ok(self_sample_term(&pu, tau, exec) + self_sample_term(&pi, tau, exec))
}

/// User-item InfoNCE: anchor `e_u`, positive `e_i`, denominator over the
/// distinct in-batch items. Mean over pairs.
pub fn cl_ui_loss(
    pairs: &PositivePairSet,
    emb: &EmbeddingState,
    tau: f64,
    kind: SimilarityKind,
    exec: Execution,
) -> Result<f64> {
    check_tau(tau)?;
    if pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let items = pairs.distinct_items();
    let slot: std::collections::HashMap<usize, usize> =
        items.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let users: Vec<usize> = pairs.pairs.iter().map(|p| p.0).collect();
    let pu = Prepared::new(&emb.users, &users, kind)?;
    let pi = Prepared::new(&emb.items, &items, kind)?;
    let per = exec.map(pairs.len(), |a| {
        let logits: Vec<f64> = (0..items.len()).map(|k| pu.sim(a, &pi, k) / tau).collect();
        log_sum_exp(&logits) - pu.sim(a, &pi, slot[&pairs.pairs[a].1]) / tau
    });
    Ok(per.iter().sum::<f64>() / pairs.len() as f64)
}

/// Rows of the NA negative set for pair `a`: every other pair whose user
/// differs from `a`'s user.
pub(crate) fn na_negative_pairs(pairs: &[(usize, usize)], a: usize) -> impl Iterator<Item = usize> + '_ {
    let ua = pairs[a].0;
    (0..pairs.len()).filter(move |&b| pairs[b].0 != ua)
}

/// Neighborhood-aggregation loss over in-batch positive pairs.
///
/// For pair `(u, i)` the negatives are the other pairs of the batch that do
/// not belong to `u` (their items, plus their users under
/// [`NaNegatives::OtherItemsAndUsers`]). The positive itself is not in the
/// denominator. Mean over pairs.
pub fn na_loss(
    pairs: &PositivePairSet,
    emb: &EmbeddingState,
    cfg: &LossConfig,
    exec: Execution,
) -> Result<f64> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let first = pairs.pairs[0].0;
    if pairs.pairs.iter().all(|p| p.0 == first) {
        return Err(LossError::NoNaNegatives(first));
    }
    let tau = cfg.tau;
    let users: Vec<usize> = pairs.pairs.iter().map(|p| p.0).collect();
    let items: Vec<usize> = pairs.pairs.iter().map(|p| p.1).collect();
    let pu = Prepared::new(&emb.users, &users, cfg.similarity)?;
    let pi = Prepared::new(&emb.items, &items, cfg.similarity)?;
    let with_users = cfg.na_negatives == NaNegatives::OtherItemsAndUsers;
    let per = exec.map(pairs.len(), |a| {
        let mut logits = Vec::with_capacity(if with_users { 2 } else { 1 } * pairs.len());
        for b in na_negative_pairs(&pairs.pairs, a) {
            logits.push(pu.sim(a, &pi, b) / tau);
            if with_users {
                logits.push(pu.sim(a, &pu, b) / tau);
            }
        }
        log_sum_exp(&logits) - pu.sim(a, &pi, a) / tau
    });
    Ok(per.iter().sum::<f64>() / pairs.len() as f64)
}

/// `-log σ(s(u,i) - s(u,j))` with dot scores, as a softplus.
pub fn bpr_loss(u: usize, pos: usize, neg: usize, emb: &EmbeddingState) -> f64 {
    let eu = emb.user(u);
    softplus(-(dot(eu, emb.item(pos)) - dot(eu, emb.item(neg))))
}

/// Mean BPR loss over a batch of triplets.
pub fn bpr_batch_loss(batch: &Batch, emb: &EmbeddingState) -> Result<f64> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let total: f64 = batch
        .triplets()
        .map(|(u, i, j)| bpr_loss(u, i, j, emb))
        .sum();
    Ok(total / batch.len() as f64)
}

/// Auxiliary term combined with BPR in the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxLoss {
    None,
    SelfSample,
    UserItem,
    NeighborhoodAggregation,
}

/// Per-term values of the joint objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpr: f64,
    /// Unweighted auxiliary loss.
    pub aux: f64,
    /// Weighted regularizer, already multiplied by `beta`.
    pub reg: f64,
    pub total: f64,
}

/// Rows of the base tables touched by a batch, deduplicated.
pub fn touched_rows(batch: &Batch) -> (Vec<usize>, Vec<usize>) {
    let users = distinct(batch.users.iter().map(|&u| u as usize));
    let items = distinct(
        batch
            .pos_items
            .iter()
            .chain(&batch.neg_items)
            .map(|&i| i as usize),
    );
    (users, items)
}

/// `(β / B) · Σ ‖e‖²` over touched (or all) rows of the base tables.
pub fn regularizer(batch: &Batch, base: &EmbeddingState, cfg: &LossConfig) -> f64 {
    let b = batch.len() as f64;
    if cfg.regularize_all_rows {
        return cfg.beta * (base.users.frobenius_sq() + base.items.frobenius_sq()) / b;
    }
    let (users, items) = touched_rows(batch);
    let sq: f64 = users.iter().map(|&u| dot(base.user(u), base.user(u))).sum::<f64>()
        + items.iter().map(|&i| dot(base.item(i), base.item(i))).sum::<f64>();
    cfg.beta * sq / b
}

/// Value of the auxiliary term on `encoded`.
pub fn aux_loss(
    aux: AuxLoss,
    batch: &Batch,
    encoded: &EmbeddingState,
    cfg: &LossConfig,
    exec: Execution,
) -> Result<f64> {
    let pairs = PositivePairSet::from_batch(batch);
    match aux {
        AuxLoss::None => Ok(0.0),
        AuxLoss::SelfSample => {
            let users: Vec<usize> = batch.users.iter().map(|&u| u as usize).collect();
            let items: Vec<usize> = batch.pos_items.iter().map(|&i| i as usize).collect();
            cl_ss_loss(&users, &items, encoded, cfg.tau, cfg.similarity, exec)
        }
        AuxLoss::UserItem => cl_ui_loss(&pairs, encoded, cfg.tau, cfg.similarity, exec),
        AuxLoss::NeighborhoodAggregation => na_loss(&pairs, encoded, cfg, exec),
    }
}

/// `L_bpr + α·L_aux + reg`, with BPR and the auxiliary term evaluated on
/// `encoded` and the regularizer on `base`.
pub fn joint_loss(
    batch: &Batch,
    base: &EmbeddingState,
    encoded: &EmbeddingState,
    aux: AuxLoss,
    cfg: &LossConfig,
    exec: Execution,
) -> Result<LossBreakdown> {
    let bpr = bpr_batch_loss(batch, encoded)?;
    let aux_value = if cfg.alpha == 0.0 {
        0.0
    } else {
        aux_loss(aux, batch, encoded, cfg, exec)?
    };
    let reg = if cfg.beta == 0.0 {
        0.0
    } else {
        regularizer(batch, base, cfg)
    };
    Ok(LossBreakdown {
        bpr,
        aux: aux_value,
        reg,
        total: bpr + cfg.alpha * aux_value + reg,
    })
}
