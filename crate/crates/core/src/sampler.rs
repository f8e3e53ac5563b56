//! Epoch batching of train edges with one uniform negative per positive.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::InteractionDataset;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SamplerError {
    #[error("user {0} has interacted with every item")]
    NoNegativeAvailable(usize),
    #[error("batch size must be at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("dataset has no train edges")]
    NoTrainEdges,
}

/// BPR triplets; `(users[k], pos_items[k])` is a train edge and
/// `(users[k], neg_items[k])` is not.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub users: Vec<u32>,
    pub pos_items: Vec<u32>,
    pub neg_items: Vec<u32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.users
            .iter()
            .zip(&self.pos_items)
            .zip(&self.neg_items)
            .map(|((&u, &i), &j)| (u as usize, i as usize, j as usize))
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Uniform draw from the items `u` has not interacted with in train.
///
/// Rejection sampling first; after 32 misses the complement is indexed
/// directly, which keeps the draw uniform.
pub fn sample_negative<R: Rng + ?Sized>(
    u: usize,
    ds: &InteractionDataset,
    rng: &mut R,
) -> Result<u32, SamplerError> {
    let n = ds.num_items();
    let pos = ds.user_neighbors(u);
    if pos.len() >= n {
        return Err(SamplerError::NoNegativeAvailable(u));
    }
    for _ in 0..32 {
        let j = rng.gen_range(0..n) as u32;
        if pos.binary_search(&j).is_err() {
            return Ok(j);
        }
    }
    // k-th item of the complement: skip over sorted positives.
    let mut k = rng.gen_range(0..n - pos.len()) as u32;
    for &p in pos {
        if p <= k {
            k += 1;
        } else {
            break;
        }
    }
    Ok(k)
}

/// Iterator over the batches of one epoch.
///
/// The edge order is a pure function of `(seed, epoch)` and each batch's
/// negatives come from an RNG seeded by `(seed, epoch, batch index)`, so
/// batches can be produced ahead of consumption without changing results.
pub struct EpochBatches<'a> {
    ds: &'a InteractionDataset,
    order: Vec<u32>,
    bounds: Vec<(usize, usize)>,
    next: usize,
    seed: u64,
    epoch: u64,
}

impl<'a> EpochBatches<'a> {
    pub fn num_batches(&self) -> usize {
        self.bounds.len()
    }

    /// Build batch `k` of the epoch.
    pub fn batch(&self, k: usize) -> Result<Batch, SamplerError> {
        let (start, end) = self.bounds[k];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.seed, self.epoch, k as u64, 1]));
        let mut b = Batch {
            users: Vec::with_capacity(end - start),
            pos_items: Vec::with_capacity(end - start),
            neg_items: Vec::with_capacity(end - start),
        };
        let train = self.ds.train();
        for &e in &self.order[start..end] {
            let edge = train[e as usize];
            b.users.push(edge.user);
            b.pos_items.push(edge.item);
            b.neg_items
                .push(sample_negative(edge.user as usize, self.ds, &mut rng)?);
        }
        Ok(b)
    }
}

impl Iterator for EpochBatches<'_> {
    type Item = Result<Batch, SamplerError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.bounds.len() {
            return None;
        }
        let b = self.batch(self.next);
        self.next += 1;
        Some(b)
    }
}

/// Split `n` into batch ranges of `size`; a trailing batch shorter than 2 is
/// merged into its predecessor.
pub fn batch_bounds(n: usize, size: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..n)
        .step_by(size.max(1))
        .map(|s| (s, (s + size).min(n)))
        .collect();
    if out.len() >= 2 {
        let (s, e) = *out.last().unwrap();
        if e - s < 2 {
            out.pop();
            out.last_mut().unwrap().1 = e;
        }
    }
    out
}

/// Shuffle all train edges for `(seed, epoch)` and cut them into batches.
pub fn epoch_batches(
    ds: &InteractionDataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<EpochBatches<'_>, SamplerError> {
    if batch_size < 2 {
        return Err(SamplerError::BatchTooSmall(batch_size));
    }
    let n = ds.train().len();
    if n == 0 {
        return Err(SamplerError::NoTrainEdges);
    }
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch, 0]));
    order.shuffle(&mut rng);
    Ok(EpochBatches {
        ds,
        bounds: batch_bounds(n, batch_size),
        order,
        next: 0,
        seed,
        epoch,
    })
}

/// Consume an epoch with batch construction running on a producer thread,
/// at most `depth` batches ahead.
pub fn for_each_prefetched<F, E>(
    batches: EpochBatches<'_>,
    depth: usize,
    mut consume: F,
) -> Result<(), E>
where
    F: FnMut(usize, Batch) -> Result<(), E>,
    E: From<SamplerError>,
{
    let (tx, rx) = std::sync::mpsc::sync_channel(depth.max(1));
    std::thread::scope(|scope| {
        let producer = &batches;
        scope.spawn(move || {
            for k in 0..producer.num_batches() {
                if tx.send(producer.batch(k)).is_err() {
                    break;
                }
            }
        });
        for (k, b) in rx.iter().enumerate() {
            consume(k, b?)?;
        }
        Ok(())
    })
}
