//! Clustered implicit-feedback generator for fixtures and small-scale runs.
//!
//! Users and items belong to latent taste clusters. Each user draws a
//! long-tailed number of interactions; each interaction comes from the
//! user's own cluster with probability `affinity`, otherwise from the whole
//! catalogue, and within either pool items are drawn by Zipf popularity.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::RawEdges;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub num_clusters: usize,
    pub min_degree: usize,
    pub mean_extra_degree: f64,
    pub max_degree: usize,
    pub affinity: f64,
    pub popularity_exponent: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_users: 1000,
            num_items: 1500,
            num_clusters: 20,
            min_degree: 5,
            mean_extra_degree: 20.0,
            max_degree: 150,
            affinity: 0.8,
            popularity_exponent: 0.8,
            seed: 2024,
        }
    }
}

impl SyntheticConfig {
    /// A handful of users and items, for unit tests and the bundled fixture.
    pub fn tiny(seed: u64) -> Self {
        Self {
            num_users: 60,
            num_items: 80,
            num_clusters: 4,
            min_degree: 4,
            mean_extra_degree: 6.0,
            max_degree: 30,
            affinity: 0.85,
            popularity_exponent: 0.7,
            seed,
        }
    }
}

/// Generate a deduplicated edge list; every user has at least
/// `min_degree` interactions.
pub fn generate(cfg: &SyntheticConfig) -> RawEdges {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.num_clusters.max(1);
    let item_cluster: Vec<usize> = (0..cfg.num_items).map(|i| i % c).collect();
    let pop: Vec<f64> = (0..cfg.num_items)
        .map(|i| 1.0 / ((i / c + 1) as f64).powf(cfg.popularity_exponent))
        .collect();
    let global = WeightedIndex::new(&pop).expect("non-empty catalogue");
    let per_cluster: Vec<(Vec<usize>, WeightedIndex<f64>)> = (0..c)
        .map(|k| {
            let members: Vec<usize> = (0..cfg.num_items).filter(|&i| item_cluster[i] == k).collect();
            let w: Vec<f64> = members.iter().map(|&i| pop[i]).collect();
            let dist = WeightedIndex::new(&w).expect("cluster has items");
            (members, dist)
        })
        .collect();

    let mut pairs = Vec::new();
    for u in 0..cfg.num_users {
        let home = rng.gen_range(0..c);
        // geometric tail on top of the floor
        let p = 1.0 / (1.0 + cfg.mean_extra_degree);
        let mut extra = 0usize;
        while rng.gen::<f64>() > p && extra < cfg.max_degree {
            extra += 1;
        }
        let degree = (cfg.min_degree + extra).min(cfg.max_degree).min(cfg.num_items);
        let mut chosen = std::collections::BTreeSet::new();
        let mut attempts = 0;
        while chosen.len() < degree && attempts < degree * 50 {
            attempts += 1;
            let item = if rng.gen::<f64>() < cfg.affinity {
                let (members, dist) = &per_cluster[home];
                members[dist.sample(&mut rng)]
            } else {
                global.sample(&mut rng)
            };
            chosen.insert(item);
        }
        pairs.extend(chosen.into_iter().map(|i| (u as u32, i as u32)));
    }
    RawEdges::from_pairs(&pairs)
}
