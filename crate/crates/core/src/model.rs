//! Embedding tables, initialization, similarity and scoring.

use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{dot, norm, Matrix};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("vector dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    Dot,
    #[default]
    Cosine,
}

impl SimilarityKind {
    fn code(self) -> u8 {
        match self {
            SimilarityKind::Dot => 0,
            SimilarityKind::Cosine => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(SimilarityKind::Dot),
            1 => Some(SimilarityKind::Cosine),
            _ => None,
        }
    }
}

/// Which embedding table a row belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Table {
    User,
    Item,
}

/// The trainable parameters: one row per user and one per item.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingState {
    pub users: Matrix,
    pub items: Matrix,
}

impl EmbeddingState {
    pub fn new(users: Matrix, items: Matrix) -> Self {
        assert_eq!(users.cols(), items.cols(), "user/item dims differ");
        Self { users, items }
    }

    pub fn zeros(num_users: usize, num_items: usize, dim: usize) -> Self {
        Self::new(Matrix::zeros(num_users, dim), Matrix::zeros(num_items, dim))
    }

    pub fn num_users(&self) -> usize {
        self.users.rows()
    }

    pub fn num_items(&self) -> usize {
        self.items.rows()
    }

    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    pub fn table(&self, t: Table) -> &Matrix {
        match t {
            Table::User => &self.users,
            Table::Item => &self.items,
        }
    }

    pub fn table_mut(&mut self, t: Table) -> &mut Matrix {
        match t {
            Table::User => &mut self.users,
            Table::Item => &mut self.items,
        }
    }

    pub fn user(&self, u: usize) -> &[f64] {
        self.users.row(u)
    }

    pub fn item(&self, i: usize) -> &[f64] {
        self.items.row(i)
    }

    pub fn all_finite(&self) -> bool {
        self.users.all_finite() && self.items.all_finite()
    }

    /// Stack users above items into one `(M+N) x d` matrix.
    pub fn stacked(&self) -> Matrix {
        let mut data = Vec::with_capacity((self.num_users() + self.num_items()) * self.dim());
        data.extend_from_slice(self.users.as_slice());
        data.extend_from_slice(self.items.as_slice());
        Matrix::from_vec(self.num_users() + self.num_items(), self.dim(), data)
    }

    /// Inverse of [`EmbeddingState::stacked`].
    pub fn from_stacked(stacked: Matrix, num_users: usize) -> Self {
        let d = stacked.cols();
        let n = stacked.rows() - num_users;
        let mut data = stacked.into_vec();
        let items = data.split_off(num_users * d);
        Self::new(Matrix::from_vec(num_users, d, data), Matrix::from_vec(n, d, items))
    }

    pub fn max_abs_diff(&self, other: &EmbeddingState) -> f64 {
        self.users
            .max_abs_diff(&other.users)
            .max(self.items.max_abs_diff(&other.items))
    }
}

/// Xavier-uniform bound for a `d x d` fan.
pub fn xavier_bound(dim: usize) -> f64 {
    (6.0 / (2 * dim) as f64).sqrt()
}

/// Draw both tables uniformly in `±sqrt(6 / (d + d))`.
pub fn init_xavier(num_users: usize, num_items: usize, dim: usize, seed: u64) -> EmbeddingState {
    assert!(dim >= 1, "embedding dimension must be positive");
    let bound = xavier_bound(dim);
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows| {
        Matrix::from_vec(
            rows,
            dim,
            (0..rows * dim).map(|_| dist.sample(&mut rng)).collect(),
        )
    };
    let users = draw(num_users);
    let items = draw(num_items);
    EmbeddingState::new(users, items)
}

/// `a·b` or `a·b / (|a||b|)`.
pub fn similarity(a: &[f64], b: &[f64], kind: SimilarityKind) -> Result<f64, ModelError> {
    if a.len() != b.len() {
        return Err(ModelError::DimensionMismatch(a.len(), b.len()));
    }
    match kind {
        SimilarityKind::Dot => Ok(dot(a, b)),
        SimilarityKind::Cosine => {
            let na = norm(a);
            let nb = norm(b);
            if na == 0.0 || nb == 0.0 {
                return Err(ModelError::ZeroVector);
            }
            Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
        }
    }
}

/// Dot-product scores of user `u` against every item.
pub fn score_all_items(u: usize, emb: &EmbeddingState) -> Vec<f64> {
    let eu = emb.user(u);
    emb.items.iter_rows().map(|ei| dot(eu, ei)).collect()
}

const MAGIC: &[u8; 8] = b"LCCFEMB1";

/// Header of a binary checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub num_users: u64,
    pub num_items: u64,
    pub dim: u64,
    pub seed: u64,
    pub similarity: SimilarityKind,
}

/// Writes magic, header and both tables as little-endian `f64`, row-major.
pub fn save_checkpoint(
    path: &Path,
    emb: &EmbeddingState,
    seed: u64,
    similarity: SimilarityKind,
) -> Result<(), ModelError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    for v in [
        emb.num_users() as u64,
        emb.num_items() as u64,
        emb.dim() as u64,
        seed,
    ] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&[similarity.code()])?;
    for v in emb.users.as_slice().iter().chain(emb.items.as_slice()) {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, EmbeddingState), ModelError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| ModelError::Checkpoint(m.to_owned());
    if bytes.len() < 41 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().unwrap());
    let header = CheckpointHeader {
        num_users: word(0),
        num_items: word(1),
        dim: word(2),
        seed: word(3),
        similarity: SimilarityKind::from_code(bytes[40]).ok_or_else(|| bad("unknown similarity"))?,
    };
    let (m, n, d) = (
        header.num_users as usize,
        header.num_items as usize,
        header.dim as usize,
    );
    if d == 0 {
        return Err(bad("zero dimension"));
    }
    let expected = m
        .checked_add(n)
        .and_then(|r| r.checked_mul(d))
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| bad("header sizes overflow"))?;
    let body = &bytes[41..];
    if body.len() != expected {
        return Err(bad(&format!(
            "expected {expected} payload bytes, found {}",
            body.len()
        )));
    }
    let vals: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let stacked = Matrix::from_vec(m + n, d, vals);
    let emb = EmbeddingState::from_stacked(stacked, m);
    if !emb.all_finite() {
        return Err(bad("non-finite entries"));
    }
    Ok((header, emb))
}
