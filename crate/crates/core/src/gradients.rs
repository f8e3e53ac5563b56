//! Hand-derived gradients of every loss, the plain gradient-descent updates
//! of the user-item InfoNCE objective (per example and in matrix form), and
//! a central finite-difference oracle.
//!
//! Under cosine similarity the full normalization Jacobian is applied:
//! `∂s/∂a = (b̂ − s·â) / |a|`.

use std::collections::{BTreeMap, HashMap};

use crate::exec::Execution;
use crate::losses::{
    distinct, na_negative_pairs, touched_rows, LossConfig, LossError, NaNegatives, PositivePairSet,
    Prepared, Result,
};
use crate::matrix::{axpy, dot, norm, sigmoid, softmax, softmax_in_place, Matrix};
use crate::model::{similarity, EmbeddingState, ModelError, SimilarityKind, Table};
use crate::sampler::Batch;

/// Sparse gradient keyed by `(table, row)`, iterated in key order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradAccumulator {
    dim: usize,
    rows: BTreeMap<(Table, usize), Vec<f64>>,
}

impl GradAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `grad[table][row] += scale * v`
    pub fn add(&mut self, table: Table, row: usize, scale: f64, v: &[f64]) {
        let dim = self.dim;
        let slot = self
            .rows
            .entry((table, row))
            .or_insert_with(|| vec![0.0; dim]);
        axpy(scale, v, slot);
    }

    pub fn get(&self, table: Table, row: usize) -> Option<&[f64]> {
        self.rows.get(&(table, row)).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Table, usize, &[f64])> {
        self.rows.iter().map(|(&(t, r), v)| (t, r, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `self += scale * other`
    pub fn merge(&mut self, other: &GradAccumulator, scale: f64) {
        for (t, r, v) in other.iter() {
            self.add(t, r, scale, v);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.rows.values().flatten().all(|v| v.is_finite())
    }

    pub fn to_dense(&self, num_users: usize, num_items: usize) -> EmbeddingState {
        let mut out = EmbeddingState::zeros(num_users, num_items, self.dim);
        self.add_into(&mut out, 1.0);
        out
    }

    /// `dense += scale * self`
    pub fn add_into(&self, dense: &mut EmbeddingState, scale: f64) {
        for (t, r, v) in self.iter() {
            axpy(scale, v, dense.table_mut(t).row_mut(r));
        }
    }

    /// Keys of `reference` pulled from a dense gradient.
    pub fn from_dense_like(dense: &EmbeddingState, reference: &GradAccumulator) -> Self {
        let mut out = GradAccumulator::new(dense.dim());
        for (t, r, _) in reference.iter() {
            out.add(t, r, 1.0, dense.table(t).row(r));
        }
        out
    }

    fn add_rows(&mut self, table: Table, idx: &[usize], grads: &Matrix) {
        for (k, &r) in idx.iter().enumerate() {
            self.add(table, r, 1.0, grads.row(k));
        }
    }
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over the union of both key sets; the plain
/// difference norm when both gradients are (numerically) zero.
pub fn relative_error(analytic: &GradAccumulator, numeric: &GradAccumulator) -> f64 {
    let mut keys: Vec<(Table, usize)> = analytic.rows.keys().copied().collect();
    keys.extend(numeric.rows.keys().copied());
    keys.sort_unstable();
    keys.dedup();
    let zero = vec![0.0; analytic.dim.max(numeric.dim)];
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for k in keys {
        let a = analytic.rows.get(&k).unwrap_or(&zero);
        let n = numeric.rows.get(&k).unwrap_or(&zero);
        for (x, y) in a.iter().zip(n) {
            diff += (x - y) * (x - y);
            na += x * x;
            nn += y * y;
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    if scale < 1e-12 {
        diff.sqrt()
    } else {
        diff.sqrt() / scale
    }
}

/// Gradients of `s(a, b)` with respect to both arguments.
pub fn similarity_grad(
    a: &[f64],
    b: &[f64],
    kind: SimilarityKind,
) -> std::result::Result<(Vec<f64>, Vec<f64>), ModelError> {
    match kind {
        SimilarityKind::Dot => {
            if a.len() != b.len() {
                return Err(ModelError::DimensionMismatch(a.len(), b.len()));
            }
            Ok((b.to_vec(), a.to_vec()))
        }
        SimilarityKind::Cosine => {
            let s = similarity(a, b, kind)?;
            let (na, nb) = (norm(a), norm(b));
            let ga = a
                .iter()
                .zip(b)
                .map(|(x, y)| (y / nb - s * x / na) / na)
                .collect();
            let gb = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x / na - s * y / nb) / nb)
                .collect();
            Ok((ga, gb))
        }
    }
}

/// Gradient of [`crate::losses::infonce`] with respect to each input vector.
#[derive(Clone, Debug, PartialEq)]
pub struct InfoNceGrad {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
    /// Softmax weights over the negatives.
    pub probs: Vec<f64>,
}

/// With `p_k = softmax_k(s(a,k)/τ)`:
/// `∂L/∂s(a,p) = −1/τ`, `∂L/∂s(a,k) = p_k/τ`, then chained through the
/// similarity. Under dot similarity the anchor gradient is
/// `−(1/τ)(e_p − Σ_k p_k e_k)`.
pub fn infonce_grad(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    tau: f64,
    kind: SimilarityKind,
) -> Result<InfoNceGrad> {
    if negatives.is_empty() {
        return Err(LossError::EmptyNegatives);
    }
    if !(tau > 0.0) {
        return Err(LossError::InvalidTemperature(tau));
    }
    let logits = negatives
        .iter()
        .map(|k| similarity(anchor, k, kind).map(|s| s / tau))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let probs = softmax(&logits);
    let (ga_pos, g_pos) = similarity_grad(anchor, positive, kind)?;
    let mut g_anchor: Vec<f64> = ga_pos.iter().map(|v| -v / tau).collect();
    let positive_grad = g_pos.iter().map(|v| -v / tau).collect();
    let mut neg_grads = Vec::with_capacity(negatives.len());
    for (k, &neg) in negatives.iter().enumerate() {
        let (ga, gk) = similarity_grad(anchor, neg, kind)?;
        let w = probs[k] / tau;
        axpy(w, &ga, &mut g_anchor);
        neg_grads.push(gk.iter().map(|v| w * v).collect());
    }
    Ok(InfoNceGrad {
        anchor: g_anchor,
        positive: positive_grad,
        negatives: neg_grads,
        probs,
    })
}

/// `a · bᵀ`, one output row per row of `a`.
pub(crate) fn gram(a: &Matrix, b: &Matrix, exec: Execution) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.rows());
    exec.for_each_row(out.as_mut_slice(), b.rows(), |i, row| {
        let ai = a.row(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v = dot(ai, b.row(j));
        }
    });
    out
}

/// `w · t`.
fn weighted_rows(w: &Matrix, t: &Matrix, exec: Execution) -> Matrix {
    let mut out = Matrix::zeros(w.rows(), t.cols());
    exec.for_each_row(out.as_mut_slice(), t.cols(), |i, g| {
        for (j, &x) in w.row(i).iter().enumerate() {
            if x != 0.0 {
                axpy(x, t.row(j), g);
            }
        }
    });
    out
}

/// Backward pass of a similarity block `s_ab = sim(a, b)` given the
/// upstream weights `w_ab = ∂L/∂s_ab` and the block `s` itself. Returns the
/// gradients of the anchor rows and of the target rows.
fn block_backward(
    pa: &Prepared,
    pt: &Prepared,
    w: &Matrix,
    s: &Matrix,
    kind: SimilarityKind,
    exec: Execution,
) -> (Matrix, Matrix) {
    let mut ga = weighted_rows(w, &pt.rows, exec);
    let mut gt = weighted_rows(&w.transpose(), &pa.rows, exec);
    if kind == SimilarityKind::Cosine {
        let mut row_sums = vec![0.0; w.rows()];
        let mut col_sums = vec![0.0; w.cols()];
        for (a, rs) in row_sums.iter_mut().enumerate() {
            for ((&x, &y), cs) in w.row(a).iter().zip(s.row(a)).zip(col_sums.iter_mut()) {
                *rs += x * y;
                *cs += x * y;
            }
        }
        for (a, &r) in row_sums.iter().enumerate() {
            axpy(-r, pa.rows.row(a), ga.row_mut(a));
        }
        for (b, &c) in col_sums.iter().enumerate() {
            axpy(-c, pt.rows.row(b), gt.row_mut(b));
        }
    }
    for (g, norms) in [(&mut ga, &pa.norms), (&mut gt, &pt.norms)] {
        for (r, &n) in norms.iter().enumerate() {
            if n != 1.0 {
                g.row_mut(r).iter_mut().for_each(|v| *v /= n);
            }
        }
    }
    (ga, gt)
}

/// Self-sample term over one set of rows: value and weights.
fn self_sample_block(s: &Matrix, tau: f64, exec: Execution) -> (f64, Matrix) {
    let n = s.rows();
    let scale = 1.0 / (tau * n as f64);
    let rows = exec.map(n, |a| {
        let mut w: Vec<f64> = s.row(a).iter().map(|v| v / tau).collect();
        let value = -w[a] + softmax_in_place(&mut w);
        w.iter_mut().for_each(|q| *q *= scale);
        w[a] -= scale;
        (value, w)
    });
    let value = rows.iter().map(|r| r.0).sum::<f64>() / n as f64;
    let w = Matrix::from_rows(&rows.into_iter().map(|r| r.1).collect::<Vec<_>>());
    (value, w)
}

/// Value and gradient of [`crate::losses::cl_ss_loss`].
pub fn cl_ss_value_grad(
    users: &[usize],
    items: &[usize],
    emb: &EmbeddingState,
    tau: f64,
    kind: SimilarityKind,
    exec: Execution,
) -> Result<(f64, GradAccumulator)> {
    if !(tau > 0.0) {
        return Err(LossError::InvalidTemperature(tau));
    }
    let users = distinct(users.iter().copied());
    let items = distinct(items.iter().copied());
    if users.is_empty() || items.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut acc = GradAccumulator::new(emb.dim());
    let mut total = 0.0;
    for (table, idx) in [(Table::User, &users), (Table::Item, &items)] {
        let p = Prepared::new(emb.table(table), idx, kind)?;
        let s = gram(&p.rows, &p.rows, exec);
        let (value, w) = self_sample_block(&s, tau, exec);
        total += value;
        let (ga, gt) = block_backward(&p, &p, &w, &s, kind, exec);
        acc.add_rows(table, idx, &ga);
        acc.add_rows(table, idx, &gt);
    }
    Ok((total, acc))
}

/// Gradient of [`crate::losses::cl_ss_loss`].
pub fn cl_ss_grad(
    users: &[usize],
    items: &[usize],
    emb: &EmbeddingState,
    tau: f64,
    kind: SimilarityKind,
    exec: Execution,
) -> Result<GradAccumulator> {
    cl_ss_value_grad(users, items, emb, tau, kind, exec).map(|r| r.1)
}

/// Value and gradient of [`crate::losses::cl_ui_loss`].
pub fn cl_ui_value_grad(
    pairs: &PositivePairSet,
    emb: &EmbeddingState,
    tau: f64,
    kind: SimilarityKind,
    exec: Execution,
) -> Result<(f64, GradAccumulator)> {
    if !(tau > 0.0) {
        return Err(LossError::InvalidTemperature(tau));
    }
    if pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let items = pairs.distinct_items();
    let slot: HashMap<usize, usize> = items.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let users: Vec<usize> = pairs.pairs.iter().map(|p| p.0).collect();
    let pu = Prepared::new(&emb.users, &users, kind)?;
    let pi = Prepared::new(&emb.items, &items, kind)?;
    let s = gram(&pu.rows, &pi.rows, exec);
    let scale = 1.0 / (tau * pairs.len() as f64);
    let rows = exec.map(pairs.len(), |a| {
        let mut w: Vec<f64> = s.row(a).iter().map(|v| v / tau).collect();
        let pos = slot[&pairs.pairs[a].1];
        let value = -w[pos] + softmax_in_place(&mut w);
        w.iter_mut().for_each(|q| *q *= scale);
        w[pos] -= scale;
        (value, w)
    });
    let value = rows.iter().map(|r| r.0).sum::<f64>() / pairs.len() as f64;
    let w = Matrix::from_rows(&rows.into_iter().map(|r| r.1).collect::<Vec<_>>());
    let (gu, gi) = block_backward(&pu, &pi, &w, &s, kind, exec);
    let mut acc = GradAccumulator::new(emb.dim());
    acc.add_rows(Table::User, &users, &gu);
    acc.add_rows(Table::Item, &items, &gi);
    Ok((value, acc))
}

/// Gradient of [`crate::losses::cl_ui_loss`].
pub fn cl_ui_grad(
    pairs: &PositivePairSet,
    emb: &EmbeddingState,
    tau: f64,
    kind: SimilarityKind,
    exec: Execution,
) -> Result<GradAccumulator> {
    cl_ui_value_grad(pairs, emb, tau, kind, exec).map(|r| r.1)
}

/// Value and gradient of [`crate::losses::na_loss`].
pub fn na_value_grad(
    pairs: &PositivePairSet,
    emb: &EmbeddingState,
    cfg: &LossConfig,
    exec: Execution,
) -> Result<(f64, GradAccumulator)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let first = pairs.pairs[0].0;
    if pairs.pairs.iter().all(|p| p.0 == first) {
        return Err(LossError::NoNaNegatives(first));
    }
    let tau = cfg.tau;
    let kind = cfg.similarity;
    let b = pairs.len();
    let users: Vec<usize> = pairs.pairs.iter().map(|p| p.0).collect();
    let items: Vec<usize> = pairs.pairs.iter().map(|p| p.1).collect();
    let pu = Prepared::new(&emb.users, &users, kind)?;
    let pi = Prepared::new(&emb.items, &items, kind)?;
    let with_users = cfg.na_negatives == NaNegatives::OtherItemsAndUsers;
    let si = gram(&pu.rows, &pi.rows, exec);
    let su = if with_users {
        gram(&pu.rows, &pu.rows, exec)
    } else {
        Matrix::zeros(0, 0)
    };
    let scale = 1.0 / (tau * b as f64);

    // Row a of the item block followed by (optionally) the user block;
    // columns outside the negative set are -inf.
    let width = if with_users { 2 * b } else { b };
    let rows = exec.map(b, |a| {
        let mut w = vec![f64::NEG_INFINITY; width];
        for c in na_negative_pairs(&pairs.pairs, a) {
            w[c] = si[(a, c)] / tau;
            if with_users {
                w[b + c] = su[(a, c)] / tau;
            }
        }
        let value = softmax_in_place(&mut w) - si[(a, a)] / tau;
        w.iter_mut().for_each(|q| *q *= scale);
        let wu = if with_users { w.split_off(b) } else { Vec::new() };
        w[a] -= scale;
        (value, w, wu)
    });
    let value = rows.iter().map(|r| r.0).sum::<f64>() / b as f64;
    let (wi_rows, wu_rows): (Vec<_>, Vec<_>) = rows.into_iter().map(|r| (r.1, r.2)).unzip();
    let wi = Matrix::from_rows(&wi_rows);
    let (gu, gi) = block_backward(&pu, &pi, &wi, &si, kind, exec);
    let mut acc = GradAccumulator::new(emb.dim());
    acc.add_rows(Table::User, &users, &gu);
    acc.add_rows(Table::Item, &items, &gi);
    if with_users {
        let wu = Matrix::from_rows(&wu_rows);
        let (ga, gt) = block_backward(&pu, &pu, &wu, &su, kind, exec);
        acc.add_rows(Table::User, &users, &ga);
        acc.add_rows(Table::User, &users, &gt);
    }
    Ok((value, acc))
}

/// Gradient of [`crate::losses::na_loss`] with respect to every touched row.
pub fn na_grad(
    pairs: &PositivePairSet,
    emb: &EmbeddingState,
    cfg: &LossConfig,
    exec: Execution,
) -> Result<GradAccumulator> {
    na_value_grad(pairs, emb, cfg, exec).map(|r| r.1)
}

/// Gradient of the mean BPR loss:
/// `∂/∂e_u = −σ(−Δ)(e_i − e_j)/B`, `∂/∂e_i = −σ(−Δ)e_u/B`,
/// `∂/∂e_j = σ(−Δ)e_u/B`.
pub fn bpr_grad(batch: &Batch, emb: &EmbeddingState) -> Result<GradAccumulator> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let inv_b = 1.0 / batch.len() as f64;
    let mut acc = GradAccumulator::new(emb.dim());
    for (u, i, j) in batch.triplets() {
        let (eu, ei, ej) = (emb.user(u), emb.item(i), emb.item(j));
        let delta = dot(eu, ei) - dot(eu, ej);
        let g = sigmoid(-delta) * inv_b;
        if g == 0.0 {
            continue;
        }
        let diff: Vec<f64> = ei.iter().zip(ej).map(|(a, b)| a - b).collect();
        acc.add(Table::User, u, -g, &diff);
        acc.add(Table::Item, i, -g, eu);
        acc.add(Table::Item, j, g, eu);
    }
    Ok(acc)
}

/// Gradient of [`crate::losses::regularizer`] on the base tables.
pub fn regularizer_grad(batch: &Batch, base: &EmbeddingState, cfg: &LossConfig) -> GradAccumulator {
    let mut acc = GradAccumulator::new(base.dim());
    let c = 2.0 * cfg.beta / batch.len() as f64;
    if cfg.regularize_all_rows {
        for u in 0..base.num_users() {
            acc.add(Table::User, u, c, base.user(u));
        }
        for i in 0..base.num_items() {
            acc.add(Table::Item, i, c, base.item(i));
        }
    } else {
        let (users, items) = touched_rows(batch);
        for u in users {
            acc.add(Table::User, u, c, base.user(u));
        }
        for i in items {
            acc.add(Table::Item, i, c, base.item(i));
        }
    }
    acc
}

/// Central differences `(f(E + h·e_k) − f(E − h·e_k)) / 2h` for every
/// coordinate of the listed rows (all rows when `rows` is `None`).
pub fn finite_difference_oracle<F>(
    loss: F,
    emb: &EmbeddingState,
    h: f64,
    rows: Option<&[(Table, usize)]>,
) -> GradAccumulator
where
    F: Fn(&EmbeddingState) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let all: Vec<(Table, usize)>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..emb.num_users())
                .map(|u| (Table::User, u))
                .chain((0..emb.num_items()).map(|i| (Table::Item, i)))
                .collect();
            &all
        }
    };
    let mut work = emb.clone();
    let mut acc = GradAccumulator::new(emb.dim());
    let mut g = vec![0.0; emb.dim()];
    for &(t, r) in rows {
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = work.table(t)[(r, k)];
            work.table_mut(t)[(r, k)] = orig + h;
            let up = loss(&work);
            work.table_mut(t)[(r, k)] = orig - h;
            let down = loss(&work);
            work.table_mut(t)[(r, k)] = orig;
            *gk = (up - down) / (2.0 * h);
        }
        acc.add(t, r, 1.0, &g);
    }
    acc
}

/// One synchronous gradient-descent step of the summed InfoNCE loss with
/// dot similarity. For each `(anchor, positive)` pair,
/// `a ← a + (η/τ)(c_pos − Σ_k p_k c_k)` with `p` the softmax over
/// `negatives`; all terms use pre-step values and anchors shared by several
/// pairs receive the sum of their updates.
pub fn sgd_step_infonce(
    anchors: &Matrix,
    candidates: &Matrix,
    pairs: &[(usize, usize)],
    negatives: &[usize],
    tau: f64,
    eta: f64,
) -> Result<Matrix> {
    if negatives.is_empty() {
        return Err(LossError::EmptyNegatives);
    }
    if !(tau > 0.0) {
        return Err(LossError::InvalidTemperature(tau));
    }
    let mut out = anchors.clone();
    let step = eta / tau;
    for &(a, pos) in pairs {
        let ea = anchors.row(a);
        let logits: Vec<f64> = negatives
            .iter()
            .map(|&k| dot(ea, candidates.row(k)) / tau)
            .collect();
        let p = softmax(&logits);
        let mut delta = candidates.row(pos).to_vec();
        for (&k, pk) in negatives.iter().zip(&p) {
            axpy(-pk, candidates.row(k), &mut delta);
        }
        axpy(step, &delta, out.row_mut(a));
    }
    Ok(out)
}

/// User-item specialization: anchors are users, positives their items, and
/// the candidate set is the distinct in-batch items. Returns the updated
/// user table.
pub fn user_item_gd_step(
    emb: &EmbeddingState,
    pairs: &PositivePairSet,
    tau: f64,
    eta: f64,
) -> Result<Matrix> {
    if pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    sgd_step_infonce(
        &emb.users,
        &emb.items,
        &pairs.pairs,
        &pairs.distinct_items(),
        tau,
        eta,
    )
}

/// Quantities of the batched update `E' = E + (η/τ)(Y − P·C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMatrices {
    /// `B x K` softmax of each batch user over the candidate items.
    pub probs: Matrix,
    /// `B x d` positive item of each pair.
    pub positives: Matrix,
    /// Candidate item ids, the columns of `probs`.
    pub candidates: Vec<usize>,
    /// Update operator, kept for inspection only.
    pub operator: UpdateOperator,
}

/// The operator `L'` with `E' = L'(E)`, stored as its two parts: the
/// elementwise quotient `Y ⊘ E` and the scaled probability matrix.
///
/// The quotient is singular where `E` vanishes; entries with `|E| < 1e-12`
/// are zeroed and counted in `masked`, so [`UpdateOperator::apply`] only
/// reproduces the update where no entry was masked.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateOperator {
    pub step: f64,
    pub quotient: Matrix,
    pub masked: usize,
}

impl UpdateOperator {
    /// `E + step·((Y ⊘ E) ∘ E − P·C)`.
    pub fn apply(&self, e: &Matrix, probs: &Matrix, candidates: &Matrix) -> Matrix {
        let mut out = e.clone();
        if self.step == 0.0 {
            return out;
        }
        let pc = probs.matmul(candidates);
        for r in 0..e.rows() {
            for c in 0..e.cols() {
                out[(r, c)] += self.step * (self.quotient[(r, c)] * e[(r, c)] - pc[(r, c)]);
            }
        }
        out
    }

    pub fn is_identity(&self) -> bool {
        self.step == 0.0
    }
}

/// Batched form of [`user_item_gd_step`]: one row per pair, so a user that
/// appears in several pairs gets several rows. Returns the updated batch
/// rows and the matrices that produced them.
pub fn matrix_form_step(
    emb: &EmbeddingState,
    pairs: &PositivePairSet,
    tau: f64,
    eta: f64,
) -> Result<(Matrix, GradientMatrices)> {
    if pairs.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if !(tau > 0.0) {
        return Err(LossError::InvalidTemperature(tau));
    }
    let users: Vec<usize> = pairs.pairs.iter().map(|p| p.0).collect();
    let pos: Vec<usize> = pairs.pairs.iter().map(|p| p.1).collect();
    let candidates = pairs.distinct_items();
    let e = emb.users.select_rows(&users);
    let y = emb.items.select_rows(&pos);
    let c = emb.items.select_rows(&candidates);

    let mut probs = Matrix::zeros(e.rows(), c.rows());
    for r in 0..e.rows() {
        let logits: Vec<f64> = c.iter_rows().map(|ck| dot(e.row(r), ck) / tau).collect();
        probs.row_mut(r).copy_from_slice(&softmax(&logits));
    }
    let step = eta / tau;
    let mut next = e.clone();
    let pc = probs.matmul(&c);
    next.add_scaled(step, &y);
    next.add_scaled(-step, &pc);

    let mut masked = 0;
    let mut quotient = Matrix::zeros(e.rows(), e.cols());
    for (q, (&yv, &ev)) in quotient
        .as_mut_slice()
        .iter_mut()
        .zip(y.as_slice().iter().zip(e.as_slice()))
    {
        if ev.abs() < 1e-12 {
            masked += 1;
        } else {
            *q = yv / ev;
        }
    }
    if masked > 0 {
        log::debug!("update operator: {masked} near-zero entries masked");
    }
    Ok((
        next,
        GradientMatrices {
            probs,
            positives: y,
            candidates,
            operator: UpdateOperator {
                step,
                quotient,
                masked,
            },
        },
    ))
}
