//! Multi-task training loop: BPR plus an optional contrastive or NA term,
//! optionally through the propagation encoder, with Adam or plain SGD,
//! periodic evaluation and patience-based early stopping.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, InteractionDataset};
use crate::evaluator::{evaluate, EvalError, EvalReport};
use crate::exec::Execution;
use crate::gradients::{
    bpr_grad, cl_ss_value_grad, cl_ui_value_grad, na_value_grad, regularizer_grad, GradAccumulator,
};
use crate::graph::{propagate, propagation_backprop, GraphError, NormalizedAdjacency, PropagationConfig};
use crate::losses::{
    bpr_batch_loss, regularizer, AuxLoss, LossBreakdown, LossConfig, LossError, PositivePairSet,
};
use crate::model::{init_xavier, EmbeddingState};
use crate::sampler::{epoch_batches, for_each_prefetched, Batch, SamplerError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite value at epoch {epoch}, batch {batch}: loss {loss:?}, |E_user|² = {user_norm_sq}, |E_item|² = {item_norm_sq}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        loss: LossBreakdown,
        user_norm_sq: f64,
        item_norm_sq: f64,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// BPR-MF (or LightGCN when `encoder_layers > 0`).
    BprOnly,
    /// BPR plus self-sample InfoNCE.
    ClSs,
    /// BPR plus user-item InfoNCE.
    ClUi,
    /// BPR plus the neighborhood-aggregation loss.
    Lightccf,
}

impl Objective {
    pub fn aux(self) -> AuxLoss {
        match self {
            Objective::BprOnly => AuxLoss::None,
            Objective::ClSs => AuxLoss::SelfSample,
            Objective::ClUi => AuxLoss::UserItem,
            Objective::Lightccf => AuxLoss::NeighborhoodAggregation,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Objective::BprOnly => "bpr_only",
            Objective::ClSs => "cl_ss",
            Objective::ClUi => "cl_ui",
            Objective::Lightccf => "lightccf",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub encoder_layers: usize,
    /// `α_0..α_L`; uniform when absent.
    pub layer_weights: Option<Vec<f64>>,
    pub dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub eval_interval: usize,
    pub optimizer: OptimizerKind,
    pub loss: LossConfig,
    pub seed: u64,
    pub ks: Vec<usize>,
    /// Cutoff whose NDCG drives early stopping.
    pub early_stop_k: usize,
    /// Carve a per-user validation split from train for early stopping.
    pub validation_ratio: Option<f64>,
    /// Batches prepared ahead on a producer thread; 0 disables.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Lightccf,
            encoder_layers: 0,
            layer_weights: None,
            dim: 64,
            batch_size: 2048,
            lr: 1e-3,
            epochs: 200,
            patience: 10,
            eval_interval: 5,
            optimizer: OptimizerKind::Adam,
            loss: LossConfig::default(),
            seed: 2024,
            ks: vec![10, 20],
            early_stop_k: 20,
            validation_ratio: None,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.eval_interval == 0 {
            return bad("eval_interval must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.ks.is_empty() || !self.ks.contains(&self.early_stop_k) {
            return bad(format!(
                "ks {:?} must contain early_stop_k {}",
                self.ks, self.early_stop_k
            ));
        }
        if self.loss.alpha < 0.0 || self.loss.beta < 0.0 {
            return bad("alpha and beta must be non-negative".into());
        }
        if let Some(w) = &self.layer_weights {
            if w.len() != self.encoder_layers + 1 {
                return bad(format!(
                    "layer_weights needs {} entries, got {}",
                    self.encoder_layers + 1,
                    w.len()
                ));
            }
        }
        self.loss.validate()?;
        Ok(())
    }

    pub fn propagation(&self) -> Result<PropagationConfig> {
        Ok(match &self.layer_weights {
            Some(w) => PropagationConfig::with_weights(self.encoder_layers, w.clone())?,
            None => PropagationConfig::uniform(self.encoder_layers),
        })
    }

    /// Short label such as `lightccf-L0-tau0.2-alpha1`.
    pub fn label(&self) -> String {
        format!(
            "{}-L{}-tau{}-alpha{}",
            self.objective.as_str(),
            self.encoder_layers,
            self.loss.tau,
            self.loss.alpha
        )
    }
}

/// Propagation encoder applied before the losses.
#[derive(Clone, Copy, Debug)]
pub struct Encoder<'a> {
    pub adj: &'a NormalizedAdjacency,
    pub prop: &'a PropagationConfig,
}

/// Value of the auxiliary term and the gradient of `bpr + α·aux` with
/// respect to the encoded embeddings.
pub fn encoded_gradient(
    batch: &Batch,
    encoded: &EmbeddingState,
    aux: AuxLoss,
    cfg: &LossConfig,
    exec: Execution,
) -> std::result::Result<(f64, GradAccumulator), LossError> {
    let mut g = bpr_grad(batch, encoded)?;
    if cfg.alpha == 0.0 {
        return Ok((0.0, g));
    }
    let pairs = PositivePairSet::from_batch(batch);
    let (value, a) = match aux {
        AuxLoss::None => return Ok((0.0, g)),
        AuxLoss::SelfSample => {
            let users: Vec<usize> = batch.users.iter().map(|&u| u as usize).collect();
            let items: Vec<usize> = batch.pos_items.iter().map(|&i| i as usize).collect();
            cl_ss_value_grad(&users, &items, encoded, cfg.tau, cfg.similarity, exec)?
        }
        AuxLoss::UserItem => cl_ui_value_grad(&pairs, encoded, cfg.tau, cfg.similarity, exec)?,
        AuxLoss::NeighborhoodAggregation => na_value_grad(&pairs, encoded, cfg, exec)?,
    };
    g.merge(&a, cfg.alpha);
    Ok((value, g))
}

/// Joint loss of one batch and its dense gradient with respect to the base
/// embeddings, chaining through the encoder when present.
pub fn batch_objective(
    batch: &Batch,
    base: &EmbeddingState,
    encoder: Option<Encoder<'_>>,
    aux: AuxLoss,
    cfg: &LossConfig,
    exec: Execution,
) -> Result<(LossBreakdown, EmbeddingState)> {
    let encoded: Cow<'_, EmbeddingState> = match encoder {
        Some(enc) => Cow::Owned(propagate(base, enc.adj, enc.prop, exec)?),
        None => Cow::Borrowed(base),
    };
    let (aux_value, upstream) = encoded_gradient(batch, &encoded, aux, cfg, exec)?;
    let bpr = bpr_batch_loss(batch, &encoded)?;
    let reg = if cfg.beta == 0.0 { 0.0 } else { regularizer(batch, base, cfg) };
    let loss = LossBreakdown {
        bpr,
        aux: aux_value,
        reg,
        total: bpr + cfg.alpha * aux_value + reg,
    };
    let mut grad = match encoder {
        Some(enc) => {
            let dense = upstream.to_dense(base.num_users(), base.num_items());
            propagation_backprop(&dense, enc.adj, enc.prop, exec)?
        }
        None => upstream.to_dense(base.num_users(), base.num_items()),
    };
    if cfg.beta != 0.0 {
        regularizer_grad(batch, base, cfg).add_into(&mut grad, 1.0);
    }
    Ok((loss, grad))
}

/// Dense SGD or Adam(0.9, 0.999, 1e-8) over both tables.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd,
    Adam {
        m: EmbeddingState,
        v: EmbeddingState,
        t: i32,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, like: &EmbeddingState) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => {
                let zero = EmbeddingState::zeros(like.num_users(), like.num_items(), like.dim());
                Optimizer::Adam {
                    m: zero.clone(),
                    v: zero,
                    t: 0,
                }
            }
        }
    }

    pub fn step(&mut self, params: &mut EmbeddingState, grad: &EmbeddingState, lr: f64) {
        match self {
            Optimizer::Sgd => {
                params.users.add_scaled(-lr, &grad.users);
                params.items.add_scaled(-lr, &grad.items);
            }
            Optimizer::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                *t += 1;
                let c1 = 1.0 - B1.powi(*t);
                let c2 = 1.0 - B2.powi(*t);
                let tables = [
                    (&mut params.users, &grad.users, &mut m.users, &mut v.users),
                    (&mut params.items, &grad.items, &mut m.items, &mut v.items),
                ];
                for (p, g, mt, vt) in tables {
                    for (((p, &g), m), v) in p
                        .as_mut_slice()
                        .iter_mut()
                        .zip(g.as_slice())
                        .zip(mt.as_mut_slice())
                        .zip(vt.as_mut_slice())
                    {
                        *m = B1 * *m + (1.0 - B1) * g;
                        *v = B2 * *v + (1.0 - B2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}

/// Metrics recorded at an evaluation epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

impl From<&EvalReport> for EvalSummary {
    fn from(r: &EvalReport) -> Self {
        Self {
            recall: r.recall.clone(),
            ndcg: r.ndcg.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub seconds: f64,
    pub cumulative_seconds: f64,
    pub eval: Option<EvalSummary>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_metric: f64,
    pub stopped_early: bool,
    pub total_seconds: f64,
}

impl RunRecord {
    /// Copy with all wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> RunRecord {
        let mut r = self.clone();
        r.total_seconds = 0.0;
        for e in &mut r.epochs {
            e.seconds = 0.0;
            e.cumulative_seconds = 0.0;
        }
        r
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        self.epochs.iter().map(|e| e.seconds).sum::<f64>() / self.epochs.len() as f64
    }
}

/// A training run in progress. Owns the base embeddings and optimizer.
pub struct Trainer<'a> {
    ds: &'a InteractionDataset,
    cfg: TrainConfig,
    exec: Execution,
    base: EmbeddingState,
    opt: Optimizer,
    adj: Option<NormalizedAdjacency>,
    prop: PropagationConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(ds: &'a InteractionDataset, cfg: TrainConfig, exec: Execution) -> Result<Self> {
        cfg.validate()?;
        if ds.train().is_empty() {
            return Err(TrainError::Config("dataset has no train edges".into()));
        }
        let base = init_xavier(ds.num_users(), ds.num_items(), cfg.dim, cfg.seed);
        let opt = Optimizer::new(cfg.optimizer, &base);
        let adj = (cfg.encoder_layers > 0).then(|| NormalizedAdjacency::build(ds));
        let prop = cfg.propagation()?;
        Ok(Self {
            ds,
            cfg,
            exec,
            base,
            opt,
            adj,
            prop,
        })
    }

    pub fn base(&self) -> &EmbeddingState {
        &self.base
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    fn encoder(&self) -> Option<Encoder<'_>> {
        self.adj.as_ref().map(|adj| Encoder {
            adj,
            prop: &self.prop,
        })
    }

    /// Embeddings used for ranking: propagated when an encoder is set.
    pub fn scoring_embeddings(&self, base: &EmbeddingState) -> Result<EmbeddingState> {
        match self.encoder() {
            Some(enc) => Ok(propagate(base, enc.adj, enc.prop, self.exec)?),
            None => Ok(base.clone()),
        }
    }

    /// One pass over the train edges. Returns the mean loss breakdown.
    pub fn run_epoch(&mut self, epoch: usize) -> Result<LossBreakdown> {
        let batches = epoch_batches(self.ds, self.cfg.batch_size, self.cfg.seed, epoch as u64)?;
        let aux = self.cfg.objective.aux();
        let exec = self.exec;
        let lr = self.cfg.lr;
        let loss_cfg = self.cfg.loss;
        let mut sum = LossBreakdown::default();
        let mut count = 0usize;
        let adj = self.adj.as_ref();
        let prop = &self.prop;
        let base = &mut self.base;
        let opt = &mut self.opt;
        let mut consume = |k: usize, batch: Batch| -> Result<()> {
            let enc = adj.map(|adj| Encoder { adj, prop });
            let (loss, grad) = batch_objective(&batch, base, enc, aux, &loss_cfg, exec)?;
            let finite = loss.total.is_finite() && grad.all_finite();
            if !finite {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: k,
                    loss,
                    user_norm_sq: base.users.frobenius_sq(),
                    item_norm_sq: base.items.frobenius_sq(),
                });
            }
            opt.step(base, &grad, lr);
            sum.bpr += loss.bpr;
            sum.aux += loss.aux;
            sum.reg += loss.reg;
            sum.total += loss.total;
            count += 1;
            Ok(())
        };
        if self.cfg.prefetch > 0 {
            for_each_prefetched(batches, self.cfg.prefetch, &mut consume)?;
        } else {
            for (k, b) in batches.enumerate() {
                consume(k, b?)?;
            }
        }
        if !self.base.all_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: count,
                loss: sum,
                user_norm_sq: self.base.users.frobenius_sq(),
                item_norm_sq: self.base.items.frobenius_sq(),
            });
        }
        let n = count.max(1) as f64;
        Ok(LossBreakdown {
            bpr: sum.bpr / n,
            aux: sum.aux / n,
            reg: sum.reg / n,
            total: sum.total / n,
        })
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Base embeddings of the best evaluation epoch.
    pub base: EmbeddingState,
    /// Embeddings used for ranking (propagated when an encoder is set).
    pub scoring: EmbeddingState,
    pub record: RunRecord,
    /// Final report of the best checkpoint on the test split.
    pub report: EvalReport,
}

/// Train with a callback invoked after every epoch.
pub fn train_with_observer(
    ds: &InteractionDataset,
    cfg: &TrainConfig,
    exec: Execution,
    mut observer: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let validation;
    let (train_ds, eval_ds) = match cfg.validation_ratio {
        Some(r) => {
            validation = ds.carve_validation(r, cfg.seed)?;
            (&validation, &validation)
        }
        None => (ds, ds),
    };
    let mut trainer = Trainer::new(train_ds, cfg.clone(), exec)?;
    let mut record = RunRecord {
        label: cfg.label(),
        best_metric: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best_base = trainer.base().clone();
    let mut bad_evals = 0usize;
    let run_start = Instant::now();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let loss = trainer.run_epoch(epoch)?;
        let seconds = t0.elapsed().as_secs_f64();
        let is_eval = (epoch + 1) % cfg.eval_interval == 0 || epoch + 1 == cfg.epochs;
        let mut eval = None;
        if is_eval {
            let scoring = trainer.scoring_embeddings(trainer.base())?;
            let report = evaluate(&scoring, eval_ds, &cfg.ks, None, exec)?;
            let metric = report.ndcg_at(cfg.early_stop_k);
            if metric > record.best_metric {
                record.best_metric = metric;
                record.best_epoch = Some(epoch);
                best_base = trainer.base().clone();
                bad_evals = 0;
            } else {
                bad_evals += 1;
            }
            eval = Some(EvalSummary::from(&report));
        }
        let cumulative = record.epochs.last().map_or(0.0, |e| e.cumulative_seconds) + seconds;
        let rec = EpochRecord {
            epoch,
            loss,
            seconds,
            cumulative_seconds: cumulative,
            eval,
        };
        log::info!(
            "{} epoch {epoch}: loss {:.5} ({:.2}s)",
            record.label,
            loss.total,
            seconds
        );
        observer(&rec);
        record.epochs.push(rec);
        if bad_evals >= cfg.patience {
            record.stopped_early = true;
            break;
        }
    }
    record.total_seconds = run_start.elapsed().as_secs_f64();
    let scoring = trainer.scoring_embeddings(&best_base)?;
    let mut report = evaluate(&scoring, ds, &cfg.ks, None, exec)?;
    report.wall_time_per_epoch = Some(record.mean_epoch_seconds());
    Ok(TrainOutcome {
        base: best_base,
        scoring,
        record,
        report,
    })
}

/// Train until `epochs` or early stopping; returns the best checkpoint.
pub fn train(ds: &InteractionDataset, cfg: &TrainConfig, exec: Execution) -> Result<TrainOutcome> {
    train_with_observer(ds, cfg, exec, |_| {})
}

/// One cell of a temperature x weight sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub tau: f64,
    pub alpha: f64,
    pub best_epoch: Option<usize>,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

/// Train every `(tau, alpha)` combination with the same seed. With
/// `workers > 1` (and the `parallel` feature) cells run concurrently;
/// output order is always `taus`-major.
pub fn run_grid(
    ds: &InteractionDataset,
    base_cfg: &TrainConfig,
    taus: &[f64],
    alphas: &[f64],
    workers: usize,
    exec: Execution,
) -> Result<Vec<GridCell>> {
    if taus.is_empty() || alphas.is_empty() {
        return Err(TrainError::Config("grid is empty".into()));
    }
    let cells: Vec<(f64, f64)> = taus
        .iter()
        .flat_map(|&t| alphas.iter().map(move |&a| (t, a)))
        .collect();
    let run = |&(tau, alpha): &(f64, f64)| -> Result<GridCell> {
        let mut cfg = base_cfg.clone();
        cfg.loss.tau = tau;
        cfg.loss.alpha = alpha;
        let out = train(ds, &cfg, exec)?;
        Ok(GridCell {
            tau,
            alpha,
            best_epoch: out.record.best_epoch,
            recall: out.report.recall,
            ndcg: out.report.ndcg,
        })
    };
    #[cfg(feature = "parallel")]
    if workers > 1 {
        use rayon::prelude::*;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| TrainError::Config(format!("thread pool: {e}")))?;
        return pool.install(|| cells.par_iter().map(run).collect());
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
    cells.iter().map(run).collect()
}

/// Per-configuration epoch timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub label: String,
    pub seconds_per_epoch: f64,
    pub epochs: usize,
    pub total_seconds: f64,
}

/// Time `epochs` training epochs per config after one untimed warmup epoch.
pub fn timing_harness(
    ds: &InteractionDataset,
    configs: &[(String, TrainConfig)],
    epochs: usize,
    exec: Execution,
) -> Result<Vec<TimingRow>> {
    let mut rows = Vec::with_capacity(configs.len());
    for (label, cfg) in configs {
        let mut trainer = Trainer::new(ds, cfg.clone(), exec)?;
        trainer.run_epoch(0)?;
        let start = Instant::now();
        for e in 0..epochs {
            trainer.run_epoch(e + 1)?;
        }
        let total = start.elapsed().as_secs_f64();
        rows.push(TimingRow {
            label: label.clone(),
            seconds_per_epoch: total / epochs.max(1) as f64,
            epochs,
            total_seconds: total,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::split_per_user;
    use crate::gradients::{finite_difference_oracle, relative_error};
    use crate::losses::joint_loss;
    use crate::matrix::dot;
    use crate::model::Table;
    use crate::synthetic::{generate, SyntheticConfig};

    fn tiny_ds(seed: u64) -> InteractionDataset {
        split_per_user(&generate(&SyntheticConfig::tiny(seed)), 0.8, seed).unwrap()
    }

    fn small_cfg(objective: Objective) -> TrainConfig {
        TrainConfig {
            objective,
            dim: 8,
            batch_size: 64,
            lr: 0.01,
            epochs: 4,
            eval_interval: 2,
            patience: 3,
            prefetch: 0,
            ..Default::default()
        }
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        let bad = [
            TrainConfig { lr: 0.0, ..ok.clone() },
            TrainConfig { patience: 0, ..ok.clone() },
            TrainConfig { batch_size: 1, ..ok.clone() },
            TrainConfig { early_stop_k: 50, ..ok.clone() },
            TrainConfig {
                encoder_layers: 2,
                layer_weights: Some(vec![1.0]),
                ..ok.clone()
            },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(TrainError::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn config_toml_like_roundtrip() {
        let cfg = small_cfg(Objective::ClUi);
        let s = serde_json::to_string(&cfg).unwrap();
        assert!(s.contains("\"cl_ui\""));
        let back: TrainConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"objective":"bpr_only"}"#).unwrap();
        assert_eq!(partial.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn bpr_only_matches_standalone_sgd() {
        let ds = tiny_ds(1);
        let mut cfg = small_cfg(Objective::BprOnly);
        cfg.optimizer = OptimizerKind::Sgd;
        cfg.loss.beta = 0.0;
        cfg.lr = 0.05;
        let mut trainer = Trainer::new(&ds, cfg.clone(), Execution::Sequential).unwrap();
        let mut manual = trainer.base().clone();
        for epoch in 0..2 {
            trainer.run_epoch(epoch).unwrap();
            for batch in epoch_batches(&ds, cfg.batch_size, cfg.seed, epoch as u64).unwrap() {
                let batch = batch.unwrap();
                let b = batch.len() as f64;
                let mut grad = EmbeddingState::zeros(manual.num_users(), manual.num_items(), cfg.dim);
                for (u, i, j) in batch.triplets() {
                    let x = dot(manual.user(u), manual.item(i)) - dot(manual.user(u), manual.item(j));
                    let g = -(1.0 - 1.0 / (1.0 + (-x).exp())) / b;
                    let (eu, ei, ej) = (manual.user(u).to_vec(), manual.item(i).to_vec(), manual.item(j).to_vec());
                    for k in 0..cfg.dim {
                        grad.users.row_mut(u)[k] += g * (ei[k] - ej[k]);
                        grad.items.row_mut(i)[k] += g * eu[k];
                        grad.items.row_mut(j)[k] -= g * eu[k];
                    }
                }
                manual.users.add_scaled(-cfg.lr, &grad.users);
                manual.items.add_scaled(-cfg.lr, &grad.items);
            }
        }
        assert!(trainer.base().max_abs_diff(&manual) < 1e-10);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_ds(2);
        for objective in [Objective::Lightccf, Objective::ClSs] {
            let cfg = small_cfg(objective);
            let a = train(&ds, &cfg, Execution::default()).unwrap();
            let b = train(&ds, &cfg, Execution::Sequential).unwrap();
            assert_eq!(a.base, b.base);
            assert_eq!(a.record.without_timings(), b.record.without_timings());
        }
    }

    #[test]
    fn prefetch_does_not_change_result() {
        let ds = tiny_ds(3);
        let cfg = small_cfg(Objective::Lightccf);
        let a = train(&ds, &cfg, Execution::Sequential).unwrap();
        let b = train(&ds, &TrainConfig { prefetch: 3, ..cfg }, Execution::Sequential).unwrap();
        assert_eq!(a.base, b.base);
    }

    #[test]
    fn early_stopping_returns_best_epoch() {
        let ds = tiny_ds(4);
        let cfg = TrainConfig {
            epochs: 30,
            eval_interval: 1,
            patience: 2,
            lr: 0.5,
            ..small_cfg(Objective::Lightccf)
        };
        let out = train(&ds, &cfg, Execution::Sequential).unwrap();
        let evals: Vec<(usize, f64)> = out
            .record
            .epochs
            .iter()
            .filter_map(|e| e.eval.as_ref().map(|m| (e.epoch, m.ndcg[&20])))
            .collect();
        let best = evals.iter().cloned().fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        assert_eq!(out.record.best_epoch, Some(best.0));
        assert_eq!(out.record.best_metric, best.1);
        if out.record.stopped_early {
            let tail = &evals[evals.len() - cfg.patience..];
            assert!(tail.iter().all(|&(_, m)| m <= best.1));
        }
        // Without a validation split the final report scores the same split.
        assert!((out.report.ndcg_at(20) - best.1).abs() < 1e-12);
    }

    #[test]
    fn joint_gradient_is_linear_in_alpha() {
        let ds = tiny_ds(5);
        let base = init_xavier(ds.num_users(), ds.num_items(), 6, 5);
        let batch = epoch_batches(&ds, 32, 5, 0).unwrap().batch(0).unwrap();
        let grad_at = |alpha: f64| {
            let cfg = LossConfig { alpha, beta: 0.0, ..Default::default() };
            batch_objective(&batch, &base, None, AuxLoss::NeighborhoodAggregation, &cfg, Execution::Sequential)
                .unwrap()
                .1
        };
        let (g0, g1, g2) = (grad_at(0.0), grad_at(1.0), grad_at(2.0));
        // g2 - g1 == g1 - g0
        let mut lhs = g2.clone();
        lhs.users.add_scaled(-1.0, &g1.users);
        lhs.items.add_scaled(-1.0, &g1.items);
        let mut rhs = g1.clone();
        rhs.users.add_scaled(-1.0, &g0.users);
        rhs.items.add_scaled(-1.0, &g0.items);
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn end_to_end_gradient_through_encoder() {
        let ds = tiny_ds(6);
        let adj = NormalizedAdjacency::build(&ds);
        let prop = PropagationConfig::uniform(2);
        let base = init_xavier(ds.num_users(), ds.num_items(), 4, 6);
        let batch = epoch_batches(&ds, 16, 6, 0).unwrap().batch(0).unwrap();
        for aux in [AuxLoss::NeighborhoodAggregation, AuxLoss::UserItem, AuxLoss::SelfSample, AuxLoss::None] {
            let cfg = LossConfig { beta: 1e-2, ..Default::default() };
            let enc = Encoder { adj: &adj, prop: &prop };
            let (_, dense) = batch_objective(&batch, &base, Some(enc), aux, &cfg, Execution::Sequential).unwrap();
            let rows: Vec<(Table, usize)> = (0..ds.num_users())
                .step_by(7)
                .map(|u| (Table::User, u))
                .chain((0..ds.num_items()).step_by(9).map(|i| (Table::Item, i)))
                .collect();
            let loss = |e: &EmbeddingState| {
                let enc_e = propagate(e, &adj, &prop, Execution::Sequential).unwrap();
                joint_loss(&batch, e, &enc_e, aux, &cfg, Execution::Sequential).unwrap().total
            };
            let numeric = finite_difference_oracle(loss, &base, 1e-6, Some(&rows));
            let analytic = GradAccumulator::from_dense_like(&dense, &numeric);
            let err = relative_error(&analytic, &numeric);
            assert!(err < 1e-6, "{aux:?}: {err}");
        }
    }

    #[test]
    fn batch_objective_loss_matches_joint_loss() {
        let ds = tiny_ds(9);
        let base = init_xavier(ds.num_users(), ds.num_items(), 6, 9);
        let batch = epoch_batches(&ds, 32, 9, 0).unwrap().batch(0).unwrap();
        let cfg = LossConfig { beta: 1e-3, alpha: 0.7, ..Default::default() };
        for aux in [AuxLoss::NeighborhoodAggregation, AuxLoss::UserItem, AuxLoss::SelfSample, AuxLoss::None] {
            let (fast, _) = batch_objective(&batch, &base, None, aux, &cfg, Execution::Sequential).unwrap();
            let reference = joint_loss(&batch, &base, &base, aux, &cfg, Execution::Sequential).unwrap();
            assert!((fast.total - reference.total).abs() < 1e-12, "{aux:?}");
            assert!((fast.aux - reference.aux).abs() < 1e-12, "{aux:?}");
        }
    }

    #[test]
    fn non_finite_aborts_with_diagnostics() {
        let ds = tiny_ds(7);
        let cfg = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            lr: 1e300,
            ..small_cfg(Objective::BprOnly)
        };
        let mut t = Trainer::new(&ds, cfg, Execution::Sequential).unwrap();
        let err = (0..5).find_map(|e| t.run_epoch(e).err()).expect("should diverge");
        assert!(matches!(err, TrainError::NonFinite { .. }), "{err}");
    }

    #[test]
    fn grid_order_and_workers_agree() {
        let ds = tiny_ds(8);
        let cfg = TrainConfig { epochs: 2, ..small_cfg(Objective::Lightccf) };
        let seq = run_grid(&ds, &cfg, &[0.1, 0.5], &[0.5, 1.0], 1, Execution::Sequential).unwrap();
        let par = run_grid(&ds, &cfg, &[0.1, 0.5], &[0.5, 1.0], 2, Execution::Sequential).unwrap();
        assert_eq!(seq, par);
        let order: Vec<(f64, f64)> = seq.iter().map(|c| (c.tau, c.alpha)).collect();
        assert_eq!(order, vec![(0.1, 0.5), (0.1, 1.0), (0.5, 0.5), (0.5, 1.0)]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = EmbeddingState::zeros(1, 1, 2);
        let mut g = EmbeddingState::zeros(1, 1, 2);
        g.users[(0, 0)] = 3.0;
        g.items[(0, 1)] = -0.5;
        let mut opt = Optimizer::new(OptimizerKind::Adam, &p);
        opt.step(&mut p, &g, 0.1);
        assert!((p.users[(0, 0)] + 0.1).abs() < 1e-8);
        assert!((p.items[(0, 1)] - 0.1).abs() < 1e-8);
        assert_eq!(p.users[(0, 1)], 0.0);
    }
}
