//! Implicit-feedback collaborative filtering built around contrastive
//! objectives.
//!
//! The crate trains two embedding tables (users and items) with BPR, in-batch
//! InfoNCE variants (self-sample and user-item positives) and the
//! neighborhood-aggregation (NA) loss, optionally through a parameter-free
//! graph propagation encoder. All gradients are derived by hand and checked
//! against a finite-difference oracle.
//!
//! Data-parallel kernels (sparse propagation, per-user evaluation, the
//! `B x B` similarity blocks of the in-batch losses, grid sweeps) run on
//! rayon when the `parallel` feature is enabled, and fall back to plain
//! sequential loops otherwise. Every reduction happens in a fixed order, so
//! results are bit-identical across both modes.

pub mod dataset;
pub mod evaluator;
pub mod exec;
pub mod gradcheck;
pub mod gradients;
pub mod graph;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod sampler;
pub mod synthetic;
pub mod trainer;

pub use dataset::{Interaction, InteractionDataset, SparsityGroup};
pub use exec::Execution;
pub use graph::{NormalizedAdjacency, PropagationConfig};
pub use losses::{LossConfig, NaNegatives};
pub use matrix::Matrix;
pub use model::{EmbeddingState, SimilarityKind, Table};
pub use sampler::Batch;
pub use trainer::{Objective, TrainConfig};
