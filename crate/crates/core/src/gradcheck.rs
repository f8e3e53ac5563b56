//! Randomized finite-difference check of every hand-derived gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Interaction, InteractionDataset};
use crate::exec::Execution;
use crate::gradients::{
    bpr_grad, cl_ss_grad, cl_ui_grad, finite_difference_oracle, infonce_grad, na_grad,
    relative_error, GradAccumulator,
};
use crate::graph::{propagate, NormalizedAdjacency, PropagationConfig};
use crate::losses::{
    bpr_batch_loss, cl_ss_loss, cl_ui_loss, infonce, joint_loss, na_loss, AuxLoss, LossConfig,
    NaNegatives, PositivePairSet,
};
use crate::model::{init_xavier, EmbeddingState, SimilarityKind, Table};
use crate::sampler::Batch;
use crate::trainer::{batch_objective, Encoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub max_users: usize,
    pub max_items: usize,
    pub max_dim: usize,
    /// Multiply analytic gradients by `1 + corrupt` before comparing.
    /// Non-zero only to exercise the failure path.
    pub corrupt: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            instances: 100,
            seed: 7,
            step: 1e-5,
            tolerance: 1e-6,
            max_users: 20,
            max_items: 30,
            max_dim: 8,
            corrupt: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub loss: String,
    pub instances: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

struct Instance {
    emb: EmbeddingState,
    pairs: Vec<(usize, usize)>,
    negs: Vec<usize>,
    tau: f64,
    kind: SimilarityKind,
}

impl Instance {
    fn random(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Self {
        let m = rng.gen_range(2..=cfg.max_users.max(2));
        let n = rng.gen_range(2..=cfg.max_items.max(2));
        let d = rng.gen_range(1..=cfg.max_dim.max(1));
        let b = rng.gen_range(2..=16);
        let mut pairs: Vec<(usize, usize)> = (0..b)
            .map(|_| (rng.gen_range(0..m), rng.gen_range(0..n)))
            .collect();
        if pairs.iter().all(|p| p.0 == pairs[0].0) {
            pairs[1].0 = (pairs[0].0 + 1) % m;
        }
        Self {
            emb: init_xavier(m, n, d, rng.gen()),
            negs: (0..b).map(|_| rng.gen_range(0..n)).collect(),
            pairs,
            tau: rng.gen_range(0.05..2.0),
            kind: if rng.gen_bool(0.5) {
                SimilarityKind::Cosine
            } else {
                SimilarityKind::Dot
            },
        }
    }

    fn batch(&self) -> Batch {
        Batch {
            users: self.pairs.iter().map(|p| p.0 as u32).collect(),
            pos_items: self.pairs.iter().map(|p| p.1 as u32).collect(),
            neg_items: self.negs.iter().map(|&j| j as u32).collect(),
        }
    }
}

const SEQ: Execution = Execution::Sequential;
const LOSSES: [&str; 8] = [
    "infonce", "cl_ss", "cl_ui", "na", "bpr", "joint_l0", "joint_l1", "joint_l3",
];

fn analytic_and_loss(
    name: &str,
    inst: &Instance,
    rng: &mut ChaCha8Rng,
) -> (GradAccumulator, Box<dyn Fn(&EmbeddingState) -> f64>) {
    let (tau, kind) = (inst.tau, inst.kind);
    let users: Vec<usize> = inst.pairs.iter().map(|p| p.0).collect();
    let items: Vec<usize> = inst.pairs.iter().map(|p| p.1).collect();
    let pairs = PositivePairSet::new(inst.pairs.clone());
    let batch = inst.batch();
    match name {
        "infonce" => {
            let n = inst.emb.num_items();
            let negs: Vec<&[f64]> = (1..n).map(|k| inst.emb.item(k)).collect();
            let g = infonce_grad(inst.emb.user(0), inst.emb.item(0), &negs, tau, kind).unwrap();
            let mut acc = GradAccumulator::new(inst.emb.dim());
            acc.add(Table::User, 0, 1.0, &g.anchor);
            acc.add(Table::Item, 0, 1.0, &g.positive);
            for (k, v) in g.negatives.iter().enumerate() {
                acc.add(Table::Item, k + 1, 1.0, v);
            }
            let loss = move |e: &EmbeddingState| {
                let negs: Vec<&[f64]> = (1..n).map(|k| e.item(k)).collect();
                infonce(e.user(0), e.item(0), &negs, tau, kind).unwrap()
            };
            (acc, Box::new(loss))
        }
        "cl_ss" => (
            cl_ss_grad(&users, &items, &inst.emb, tau, kind, SEQ).unwrap(),
            Box::new(move |e| cl_ss_loss(&users, &items, e, tau, kind, SEQ).unwrap()),
        ),
        "cl_ui" => (
            cl_ui_grad(&pairs, &inst.emb, tau, kind, SEQ).unwrap(),
            Box::new(move |e| cl_ui_loss(&pairs, e, tau, kind, SEQ).unwrap()),
        ),
        "na" => {
            let cfg = LossConfig {
                tau,
                similarity: kind,
                na_negatives: if rng.gen_bool(0.5) {
                    NaNegatives::OtherItemsAndUsers
                } else {
                    NaNegatives::OtherItems
                },
                ..Default::default()
            };
            (
                na_grad(&pairs, &inst.emb, &cfg, SEQ).unwrap(),
                Box::new(move |e| na_loss(&pairs, e, &cfg, SEQ).unwrap()),
            )
        }
        "bpr" => (
            bpr_grad(&batch, &inst.emb).unwrap(),
            Box::new(move |e| bpr_batch_loss(&batch, e).unwrap()),
        ),
        joint => {
            let layers: usize = joint.trim_start_matches("joint_l").parse().unwrap();
            let (m, n) = (inst.emb.num_users(), inst.emb.num_items());
            let mut train: Vec<Interaction> = inst
                .pairs
                .iter()
                .map(|&(u, i)| Interaction::new(u as u32, i as u32))
                .collect();
            for _ in 0..rng.gen_range(0..40) {
                train.push(Interaction::new(
                    rng.gen_range(0..m) as u32,
                    rng.gen_range(0..n) as u32,
                ));
            }
            let ds = InteractionDataset::from_splits(m, n, train, Vec::new()).unwrap();
            let adj = NormalizedAdjacency::build(&ds);
            let prop = PropagationConfig::uniform(layers);
            let aux = [
                AuxLoss::None,
                AuxLoss::SelfSample,
                AuxLoss::UserItem,
                AuxLoss::NeighborhoodAggregation,
            ][rng.gen_range(0..4)];
            let cfg = LossConfig {
                tau,
                similarity: kind,
                alpha: 0.7,
                beta: 1e-2,
                ..Default::default()
            };
            let enc = (layers > 0).then_some(Encoder {
                adj: &adj,
                prop: &prop,
            });
            let (_, dense) = batch_objective(&batch, &inst.emb, enc, aux, &cfg, SEQ).unwrap();
            let mut acc = GradAccumulator::new(inst.emb.dim());
            for t in [Table::User, Table::Item] {
                for r in 0..dense.table(t).rows() {
                    acc.add(t, r, 1.0, dense.table(t).row(r));
                }
            }
            let loss = move |e: &EmbeddingState| {
                let encoded = if layers > 0 {
                    propagate(e, &adj, &prop, SEQ).unwrap()
                } else {
                    e.clone()
                };
                joint_loss(&batch, e, &encoded, aux, &cfg, SEQ).unwrap().total
            };
            (acc, Box::new(loss))
        }
    }
}

/// Check every loss on `cfg.instances` random instances.
pub fn run(cfg: &GradcheckConfig) -> Vec<GradcheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    LOSSES
        .iter()
        .map(|&name| {
            let mut worst = 0.0f64;
            for _ in 0..cfg.instances {
                let inst = Instance::random(cfg, &mut rng);
                let (analytic, loss) = analytic_and_loss(name, &inst, &mut rng);
                let mut scaled = GradAccumulator::new(analytic.dim());
                scaled.merge(&analytic, 1.0 + cfg.corrupt);
                let numeric = finite_difference_oracle(loss, &inst.emb, cfg.step, None);
                worst = worst.max(relative_error(&scaled, &numeric));
            }
            GradcheckRow {
                loss: name.to_owned(),
                instances: cfg.instances,
                max_relative_error: worst,
                passed: worst < cfg.tolerance,
            }
        })
        .collect()
}
