//! Bipartite adjacency with symmetric degree normalization, and the
//! parameter-free multi-layer propagation encoder built on it.
//!
//! Nodes are ordered users first (`0..M`) then items (`M..M+N`). The only
//! non-zero entries are `(u, M+i)` and `(M+i, u)` for train edges, with
//! weight `1 / sqrt(deg(u) · deg(i))`. No self-loops are added.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::InteractionDataset;
use crate::exec::Execution;
use crate::matrix::{axpy, Matrix};
use crate::model::EmbeddingState;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("embedding has {rows} rows, adjacency has {size} nodes")]
    DimensionMismatch { rows: usize, size: usize },
    #[error("expected {expected} layer weights, got {got}")]
    LayerWeights { expected: usize, got: usize },
    #[error("user {0} has no train neighbors")]
    IsolatedUser(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-compressed `D^{-1/2} A D^{-1/2}` over the `(M+N)`-node bipartite graph.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    num_users: usize,
    num_items: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    weights: Vec<f64>,
    isolated: usize,
}

impl NormalizedAdjacency {
    /// Build from the train edges of `ds`. Zero-degree nodes keep empty rows
    /// and are counted in [`NormalizedAdjacency::isolated_nodes`].
    pub fn build(ds: &InteractionDataset) -> Self {
        let m = ds.num_users();
        let n = ds.num_items();
        let mut row_ptr = Vec::with_capacity(m + n + 1);
        let mut col_idx = Vec::with_capacity(2 * ds.train().len());
        let mut weights = Vec::with_capacity(2 * ds.train().len());
        let mut isolated = 0;
        row_ptr.push(0);
        for u in 0..m {
            let du = ds.user_degree(u) as f64;
            if du == 0.0 {
                isolated += 1;
            }
            for &i in ds.user_neighbors(u) {
                let di = ds.item_degree(i as usize) as f64;
                col_idx.push((m + i as usize) as u32);
                weights.push(1.0 / (du * di).sqrt());
            }
            row_ptr.push(col_idx.len());
        }
        for i in 0..n {
            let di = ds.item_degree(i) as f64;
            if di == 0.0 {
                isolated += 1;
            }
            for &u in ds.item_neighbors(i) {
                let du = ds.user_degree(u as usize) as f64;
                col_idx.push(u);
                weights.push(1.0 / (du * di).sqrt());
            }
            row_ptr.push(col_idx.len());
        }
        if isolated > 0 {
            log::warn!("{isolated} nodes have no train edges and are left unconnected");
        }
        Self {
            num_users: m,
            num_items: n,
            row_ptr,
            col_idx,
            weights,
            isolated,
        }
    }

    pub fn size(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn nnz(&self) -> usize {
        self.weights.len()
    }

    pub fn isolated_nodes(&self) -> usize {
        self.isolated
    }

    /// `(column, weight)` pairs of row `r`, columns ascending.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .map(|&c| c as usize)
            .zip(self.weights[span].iter().copied())
    }

    /// Weight of entry `(r, c)`, zero when absent.
    pub fn weight(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[span.clone()].binary_search(&(c as u32)) {
            Ok(k) => self.weights[span.start + k],
            Err(_) => 0.0,
        }
    }

    /// All `(row, col, weight)` triplets in row order.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.size())
            .flat_map(|r| self.row(r).map(move |(c, w)| (r, c, w)))
            .collect()
    }

    /// Write `row col weight` lines.
    pub fn dump(&self, path: &Path) -> Result<(), GraphError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (r, c, w) in self.triplets() {
            writeln!(out, "{r} {c} {w:.17e}")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Sparse-dense product `Ã · x`.
    pub fn spmm(&self, x: &Matrix, exec: Execution) -> Result<Matrix, GraphError> {
        if x.rows() != self.size() {
            return Err(GraphError::DimensionMismatch {
                rows: x.rows(),
                size: self.size(),
            });
        }
        let d = x.cols();
        let mut out = Matrix::zeros(x.rows(), d);
        exec.for_each_row(out.as_mut_slice(), d, |r, orow| {
            for (c, w) in self.row(r) {
                axpy(w, x.row(c), orow);
            }
        });
        Ok(out)
    }
}

/// Number of layers and per-layer mixing weights `α_0..α_L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    layer_weights: Vec<f64>,
}

impl PropagationConfig {
    /// Uniform weights `1 / (L + 1)`.
    pub fn uniform(num_layers: usize) -> Self {
        let w = 1.0 / (num_layers + 1) as f64;
        Self {
            layer_weights: vec![w; num_layers + 1],
        }
    }

    pub fn with_weights(num_layers: usize, weights: Vec<f64>) -> Result<Self, GraphError> {
        if weights.len() != num_layers + 1 {
            return Err(GraphError::LayerWeights {
                expected: num_layers + 1,
                got: weights.len(),
            });
        }
        Ok(Self {
            layer_weights: weights,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layer_weights.len() - 1
    }

    pub fn layer_weights(&self) -> &[f64] {
        &self.layer_weights
    }
}

/// `Σ_j α_j Ã^j x` on a stacked `(M+N) x d` matrix.
pub fn propagate_matrix(
    x: &Matrix,
    adj: &NormalizedAdjacency,
    cfg: &PropagationConfig,
    exec: Execution,
) -> Result<Matrix, GraphError> {
    if x.rows() != adj.size() {
        return Err(GraphError::DimensionMismatch {
            rows: x.rows(),
            size: adj.size(),
        });
    }
    let alphas = cfg.layer_weights();
    let mut out = x.clone();
    out.scale(alphas[0]);
    let mut layer = x.clone();
    for &alpha in &alphas[1..] {
        layer = adj.spmm(&layer, exec)?;
        out.add_scaled(alpha, &layer);
    }
    Ok(out)
}

/// Propagate base embeddings through `L` layers of the normalized adjacency.
pub fn propagate(
    base: &EmbeddingState,
    adj: &NormalizedAdjacency,
    cfg: &PropagationConfig,
    exec: Execution,
) -> Result<EmbeddingState, GraphError> {
    if base.num_users() != adj.num_users {
        return Err(GraphError::DimensionMismatch {
            rows: base.num_users() + base.num_items(),
            size: adj.size(),
        });
    }
    let out = propagate_matrix(&base.stacked(), adj, cfg, exec)?;
    Ok(EmbeddingState::from_stacked(out, base.num_users()))
}

/// Pull gradients with respect to propagated embeddings back to the base
/// table. `Ã` is symmetric, so the adjoint of propagation is propagation.
pub fn propagation_backprop(
    upstream: &EmbeddingState,
    adj: &NormalizedAdjacency,
    cfg: &PropagationConfig,
    exec: Execution,
) -> Result<EmbeddingState, GraphError> {
    propagate(upstream, adj, cfg, exec)
}

/// One explicit aggregation step for a single user:
/// `Σ_{i∈N_u} e_i / sqrt(|N_u| |N_i|)`.
pub fn layer0_user_aggregation(
    u: usize,
    emb: &EmbeddingState,
    ds: &InteractionDataset,
) -> Result<Vec<f64>, GraphError> {
    let neigh = ds.user_neighbors(u);
    if neigh.is_empty() {
        return Err(GraphError::IsolatedUser(u));
    }
    let du = neigh.len() as f64;
    let mut out = vec![0.0; emb.dim()];
    for &i in neigh {
        let di = ds.item_degree(i as usize) as f64;
        axpy(1.0 / (du * di).sqrt(), emb.item(i as usize), &mut out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Interaction;

    fn fixture() -> InteractionDataset {
        // u0 -- {i0, i1}, u1 -- {i0}
        InteractionDataset::from_splits(
            2,
            2,
            vec![
                Interaction::new(0, 0),
                Interaction::new(0, 1),
                Interaction::new(1, 0),
            ],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn single_edge_weight_is_one() {
        let ds = InteractionDataset::from_splits(1, 1, vec![Interaction::new(0, 0)], vec![]).unwrap();
        let adj = NormalizedAdjacency::build(&ds);
        assert_eq!(adj.triplets(), vec![(0, 1, 1.0), (1, 0, 1.0)]);
    }

    #[test]
    fn fixture_weights() {
        let adj = NormalizedAdjacency::build(&fixture());
        assert_eq!(adj.weight(0, 2), 0.5);
        assert!((adj.weight(0, 3) - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((adj.weight(1, 2) - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(adj.weight(1, 3), 0.0);
        assert_eq!(adj.weight(0, 1), 0.0);
        for (r, c, w) in adj.triplets() {
            assert_eq!(adj.weight(c, r), w);
        }
    }

    #[test]
    fn isolated_nodes_counted() {
        let ds = InteractionDataset::from_splits(2, 3, vec![Interaction::new(0, 0)], vec![]).unwrap();
        let adj = NormalizedAdjacency::build(&ds);
        assert_eq!(adj.isolated_nodes(), 3);
        assert_eq!(adj.nnz(), 2);
    }

    #[test]
    fn zero_layers_scales_by_alpha0() {
        let ds = fixture();
        let adj = NormalizedAdjacency::build(&ds);
        let e = crate::model::init_xavier(2, 2, 3, 1);
        let out = propagate(&e, &adj, &PropagationConfig::uniform(0), Execution::default()).unwrap();
        assert_eq!(out, e);
    }

    #[test]
    fn one_layer_fixture_by_hand() {
        let ds = fixture();
        let adj = NormalizedAdjacency::build(&ds);
        let e = crate::model::init_xavier(2, 2, 3, 5);
        let (a0, a1) = (0.3, 0.7);
        let cfg = PropagationConfig::with_weights(1, vec![a0, a1]).unwrap();
        let out = propagate(&e, &adj, &cfg, Execution::Sequential).unwrap();
        let s = 1.0 / 2f64.sqrt();
        for k in 0..3 {
            let want_u1 = a0 * e.user(1)[k] + a1 * s * e.item(0)[k];
            assert!((out.user(1)[k] - want_u1).abs() < 1e-15);
            let want_u0 = a0 * e.user(0)[k] + a1 * (0.5 * e.item(0)[k] + s * e.item(1)[k]);
            assert!((out.user(0)[k] - want_u0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_user_aggregation() {
        let ds = fixture();
        let e = crate::model::init_xavier(2, 2, 4, 2);
        let agg = layer0_user_aggregation(0, &e, &ds).unwrap();
        for k in 0..4 {
            let want = 0.5 * e.item(0)[k] + e.item(1)[k] / 2f64.sqrt();
            assert!((agg[k] - want).abs() < 1e-15);
        }
        let cfg = PropagationConfig::with_weights(1, vec![0.0, 1.0]).unwrap();
        let adj = NormalizedAdjacency::build(&ds);
        let out = propagate(&e, &adj, &cfg, Execution::default()).unwrap();
        for k in 0..4 {
            assert!((out.user(0)[k] - agg[k]).abs() < 1e-15);
        }

        let one = InteractionDataset::from_splits(2, 1, vec![Interaction::new(0, 0)], vec![]).unwrap();
        let e1 = crate::model::init_xavier(2, 1, 3, 4);
        assert_eq!(layer0_user_aggregation(0, &e1, &one).unwrap(), e1.item(0));
        assert!(matches!(
            layer0_user_aggregation(1, &e1, &one),
            Err(GraphError::IsolatedUser(1))
        ));
    }

    #[test]
    fn regular_graph_rows_sum_to_one() {
        // complete bipartite K_{3,3}: every degree is 3, rows sum to 3 * 1/3
        let train: Vec<Interaction> = (0..3)
            .flat_map(|u| (0..3).map(move |i| Interaction::new(u, i)))
            .collect();
        let ds = InteractionDataset::from_splits(3, 3, train, vec![]).unwrap();
        let adj = NormalizedAdjacency::build(&ds);
        for r in 0..6 {
            let s: f64 = adj.row(r).map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_dimensions() {
        let adj = NormalizedAdjacency::build(&fixture());
        let e = crate::model::init_xavier(3, 2, 2, 0);
        assert!(propagate(&e, &adj, &PropagationConfig::uniform(1), Execution::default()).is_err());
        assert!(PropagationConfig::with_weights(2, vec![1.0]).is_err());
    }
}
