//! Interaction ingestion, per-user train/test splitting, sparsity groups and
//! noise injection.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("no interactions found in {0}")]
    Empty(PathBuf),
    #[error("train ratio must lie strictly between 0 and 1, got {0}")]
    InvalidRatio(f64),
    #[error("noise ratio must be non-negative and finite, got {0}")]
    InvalidNoiseRatio(f64),
    #[error("cannot inject {requested} edges: only {available} empty cells")]
    InsufficientCells { requested: usize, available: usize },
    #[error("sparsity boundaries must be strictly increasing, got ({0}, {1})")]
    InvalidBoundaries(usize, usize),
    #[error("interaction ({user}, {item}) out of range for {num_users} users x {num_items} items")]
    OutOfRange {
        user: u32,
        item: u32,
        num_users: usize,
        num_items: usize,
    },
    #[error("manifest does not match split files: {0}")]
    ManifestMismatch(String),
    #[error("invalid manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// On-disk layout of a raw interaction file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    /// `user item` per line.
    PairPerLine,
    /// `user item1 item2 ...` per line.
    UserAdjacencyLine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
}

impl Interaction {
    pub fn new(user: u32, item: u32) -> Self {
        Self { user, item }
    }
}

/// Stable first-seen mapping from raw string ids to dense indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdMap {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdMap {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Writes `index<TAB>raw id` lines.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let io = |source| DatasetError::Io {
            path: path.to_owned(),
            source,
        };
        let mut out = std::io::BufWriter::new(File::create(path).map_err(io)?);
        for (i, n) in self.names.iter().enumerate() {
            writeln!(out, "{i}\t{n}").map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

/// Parsed, deduplicated edge list with its id mappings.
#[derive(Clone, Debug)]
pub struct RawEdges {
    pub users: IdMap,
    pub items: IdMap,
    /// Unique edges in first-seen order.
    pub edges: Vec<Interaction>,
    /// Number of duplicate lines dropped.
    pub duplicates: usize,
}

impl RawEdges {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    /// Build from already-dense integer pairs; ids are their decimal strings.
    pub fn from_pairs(pairs: &[(u32, u32)]) -> Self {
        let mut raw = RawEdges {
            users: IdMap::default(),
            items: IdMap::default(),
            edges: Vec::new(),
            duplicates: 0,
        };
        let mut seen = HashSet::new();
        for &(u, i) in pairs {
            raw.push(&u.to_string(), &i.to_string(), &mut seen);
        }
        raw
    }

    fn push(&mut self, user: &str, item: &str, seen: &mut HashSet<Interaction>) {
        let e = Interaction::new(self.users.intern(user), self.items.intern(item));
        if seen.insert(e) {
            self.edges.push(e);
        } else {
            self.duplicates += 1;
        }
    }

    /// Persist both id mappings as `users.tsv` / `items.tsv` in `dir`.
    pub fn write_id_maps(&self, dir: &Path) -> Result<()> {
        self.users.write_to(&dir.join("users.tsv"))?;
        self.items.write_to(&dir.join("items.tsv"))
    }
}

fn open_maybe_gzip(path: &Path) -> Result<Box<dyn BufRead>> {
    let io = |source| DatasetError::Io {
        path: path.to_owned(),
        source,
    };
    let mut file = File::open(path).map_err(io)?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic).map_err(io)?;
    drop(file);
    let file = File::open(path).map_err(io)?;
    if n == 2 && magic == [0x1f, 0x8b] {
        Ok(Box::new(BufReader::new(flate2::read::MultiGzDecoder::new(
            file,
        ))))
    } else {
        Ok(Box::new(BufReader::new(file)))
    }
}

/// Read an interaction file (plain or gzip), compacting raw ids to dense
/// indices in first-seen order and dropping duplicate edges.
///
/// Blank lines and lines starting with `#` are skipped.
pub fn load_interactions(path: &Path, format: InputFormat) -> Result<RawEdges> {
    let reader = open_maybe_gzip(path)?;
    let mut raw = RawEdges {
        users: IdMap::default(),
        items: IdMap::default(),
        edges: Vec::new(),
        duplicates: 0,
    };
    let mut seen = HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_owned(),
            source,
        })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        let malformed = |reason: &str| DatasetError::Malformed {
            path: path.to_owned(),
            line: lineno + 1,
            reason: reason.to_owned(),
        };
        match format {
            InputFormat::PairPerLine => {
                if tokens.len() != 2 {
                    return Err(malformed(&format!(
                        "expected `user item`, found {} fields",
                        tokens.len()
                    )));
                }
                raw.push(tokens[0], tokens[1], &mut seen);
            }
            InputFormat::UserAdjacencyLine => {
                if tokens.len() < 2 {
                    return Err(malformed("expected `user item1 [item2 ...]`"));
                }
                for item in &tokens[1..] {
                    raw.push(tokens[0], item, &mut seen);
                }
            }
        }
    }
    if raw.edges.is_empty() {
        return Err(DatasetError::Empty(path.to_owned()));
    }
    if raw.duplicates > 0 {
        log::warn!(
            "{}: dropped {} duplicate interactions",
            path.display(),
            raw.duplicates
        );
    }
    Ok(raw)
}

/// Train/test split with adjacency lists in both directions.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    num_users: usize,
    num_items: usize,
    train: Vec<Interaction>,
    test: Vec<Interaction>,
    user_neighbors: Vec<Vec<u32>>,
    item_neighbors: Vec<Vec<u32>>,
    test_neighbors: Vec<Vec<u32>>,
    injected: Vec<Interaction>,
    cold_start_dropped: usize,
    seed: Option<u64>,
    train_ratio: Option<f64>,
}

impl InteractionDataset {
    /// Assemble a dataset from explicit splits.
    ///
    /// Duplicates inside a split are removed, test edges that repeat a train
    /// edge are dropped, and test edges of users with no train interactions
    /// are dropped and counted.
    pub fn from_splits(
        num_users: usize,
        num_items: usize,
        train: Vec<Interaction>,
        test: Vec<Interaction>,
    ) -> Result<Self> {
        for e in train.iter().chain(&test) {
            if e.user as usize >= num_users || e.item as usize >= num_items {
                return Err(DatasetError::OutOfRange {
                    user: e.user,
                    item: e.item,
                    num_users,
                    num_items,
                });
            }
        }
        let mut train = train;
        train.sort_unstable();
        train.dedup();
        let train_set: HashSet<Interaction> = train.iter().copied().collect();

        let mut user_neighbors = vec![Vec::new(); num_users];
        let mut item_neighbors = vec![Vec::new(); num_items];
        for e in &train {
            user_neighbors[e.user as usize].push(e.item);
            item_neighbors[e.item as usize].push(e.user);
        }
        for l in item_neighbors.iter_mut() {
            l.sort_unstable();
        }

        let mut test = test;
        test.sort_unstable();
        test.dedup();
        let mut cold = HashSet::new();
        test.retain(|e| {
            if user_neighbors[e.user as usize].is_empty() {
                cold.insert(e.user);
                return false;
            }
            !train_set.contains(e)
        });
        if !cold.is_empty() {
            log::warn!("dropped {} cold-start test users", cold.len());
        }
        let mut test_neighbors = vec![Vec::new(); num_users];
        for e in &test {
            test_neighbors[e.user as usize].push(e.item);
        }

        Ok(Self {
            num_users,
            num_items,
            train,
            test,
            user_neighbors,
            item_neighbors,
            test_neighbors,
            injected: Vec::new(),
            cold_start_dropped: cold.len(),
            seed: None,
            train_ratio: None,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Train edges, sorted by `(user, item)`.
    pub fn train(&self) -> &[Interaction] {
        &self.train
    }

    pub fn test(&self) -> &[Interaction] {
        &self.test
    }

    /// Sorted train items of `u`.
    pub fn user_neighbors(&self, u: usize) -> &[u32] {
        &self.user_neighbors[u]
    }

    /// Sorted train users of `i`.
    pub fn item_neighbors(&self, i: usize) -> &[u32] {
        &self.item_neighbors[i]
    }

    /// Sorted held-out items of `u`.
    pub fn test_items(&self, u: usize) -> &[u32] {
        &self.test_neighbors[u]
    }

    pub fn user_degree(&self, u: usize) -> usize {
        self.user_neighbors[u].len()
    }

    pub fn item_degree(&self, i: usize) -> usize {
        self.item_neighbors[i].len()
    }

    pub fn is_train_edge(&self, u: usize, i: u32) -> bool {
        self.user_neighbors[u].binary_search(&i).is_ok()
    }

    /// Noise edges added by [`inject_noise`], sorted.
    pub fn injected(&self) -> &[Interaction] {
        &self.injected
    }

    pub fn cold_start_dropped(&self) -> usize {
        self.cold_start_dropped
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    /// `|train ∪ test| / (M·N)`.
    pub fn density(&self) -> f64 {
        (self.train.len() + self.test.len()) as f64 / (self.num_users as f64 * self.num_items as f64)
    }

    /// Users with at least one held-out item.
    pub fn evaluable_users(&self) -> Vec<usize> {
        (0..self.num_users)
            .filter(|&u| !self.test_neighbors[u].is_empty())
            .collect()
    }

    /// SHA-256 over dimensions and both splits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.num_users as u64).to_le_bytes());
        h.update((self.num_items as u64).to_le_bytes());
        for (tag, split) in [(0u8, &self.train), (1u8, &self.test)] {
            h.update([tag]);
            h.update((split.len() as u64).to_le_bytes());
            for e in split.iter() {
                h.update(e.user.to_le_bytes());
                h.update(e.item.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            num_users: self.num_users,
            num_items: self.num_items,
            train_edges: self.train.len(),
            test_edges: self.test.len(),
            density: self.density(),
            seed: self.seed,
            train_ratio: self.train_ratio,
            cold_start_dropped: self.cold_start_dropped,
            injected_edges: self.injected.len(),
            duplicates_dropped: 0,
            fingerprint: self.fingerprint(),
        }
    }

    /// Writes `train.txt`, `test.txt`, `manifest.json` and, when present,
    /// `injected.txt` to `dir`.
    pub fn save(&self, dir: &Path) -> Result<SplitManifest> {
        self.save_with_duplicates(dir, 0)
    }

    /// Like [`InteractionDataset::save`], recording `duplicates` dropped
    /// input lines in the manifest.
    pub fn save_with_duplicates(&self, dir: &Path, duplicates: usize) -> Result<SplitManifest> {
        let io = |p: &Path| {
            let p = p.to_owned();
            move |source| DatasetError::Io { path: p, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        write_edges(&dir.join("train.txt"), &self.train)?;
        write_edges(&dir.join("test.txt"), &self.test)?;
        if !self.injected.is_empty() {
            write_edges(&dir.join("injected.txt"), &self.injected)?;
        }
        let mut manifest = self.manifest();
        manifest.duplicates_dropped = duplicates;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text + "\n").map_err(io(&path))?;
        Ok(manifest)
    }

    /// Reload a directory written by [`InteractionDataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = std::fs::read_to_string(&mpath).map_err(|source| DatasetError::Io {
            path: mpath.clone(),
            source,
        })?;
        let manifest: SplitManifest = serde_json::from_str(&text)?;
        let train = read_edges(&dir.join("train.txt"))?;
        let test = read_edges(&dir.join("test.txt"))?;
        let injected_path = dir.join("injected.txt");
        let injected = if injected_path.exists() {
            read_edges(&injected_path)?
        } else {
            Vec::new()
        };
        let mut ds = Self::from_splits(manifest.num_users, manifest.num_items, train, test)?;
        ds.injected = injected;
        ds.seed = manifest.seed;
        ds.train_ratio = manifest.train_ratio;
        ds.cold_start_dropped = manifest.cold_start_dropped;
        if ds.fingerprint() != manifest.fingerprint {
            return Err(DatasetError::ManifestMismatch(format!(
                "fingerprint {} != {}",
                ds.fingerprint(),
                manifest.fingerprint
            )));
        }
        Ok(ds)
    }

    /// Carve a per-user validation split out of the training edges. The
    /// returned dataset holds the validation edges in its test role.
    pub fn carve_validation(&self, train_ratio: f64, seed: u64) -> Result<Self> {
        split_edges(self.num_users, self.num_items, &self.train, train_ratio, seed)
    }
}

/// Summary written next to a split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub num_users: usize,
    pub num_items: usize,
    pub train_edges: usize,
    pub test_edges: usize,
    pub density: f64,
    pub seed: Option<u64>,
    pub train_ratio: Option<f64>,
    pub cold_start_dropped: usize,
    pub injected_edges: usize,
    pub duplicates_dropped: usize,
    pub fingerprint: String,
}

fn write_edges(path: &Path, edges: &[Interaction]) -> Result<()> {
    let io = |source| DatasetError::Io {
        path: path.to_owned(),
        source,
    };
    let mut out = std::io::BufWriter::new(File::create(path).map_err(io)?);
    for e in edges {
        writeln!(out, "{} {}", e.user, e.item).map_err(io)?;
    }
    out.flush().map_err(io)
}

fn read_edges(path: &Path) -> Result<Vec<Interaction>> {
    let reader = open_maybe_gzip(path)?;
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.to_owned(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace().map(str::parse::<u32>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(u)), Some(Ok(i)), None) => out.push(Interaction::new(u, i)),
            _ => {
                return Err(DatasetError::Malformed {
                    path: path.to_owned(),
                    line: lineno + 1,
                    reason: "expected two integer indices".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Number of train edges kept for a user with `n` interactions.
fn train_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n)
}

fn split_edges(
    num_users: usize,
    num_items: usize,
    edges: &[Interaction],
    train_ratio: f64,
    seed: u64,
) -> Result<InteractionDataset> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(DatasetError::InvalidRatio(train_ratio));
    }
    let mut per_user: Vec<Vec<u32>> = vec![Vec::new(); num_users];
    for e in edges {
        per_user[e.user as usize].push(e.item);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(edges.len());
    let mut test = Vec::new();
    for (u, items) in per_user.iter_mut().enumerate() {
        if items.is_empty() {
            continue;
        }
        items.shuffle(&mut rng);
        let k = train_count(items.len(), train_ratio);
        train.extend(items[..k].iter().map(|&i| Interaction::new(u as u32, i)));
        test.extend(items[k..].iter().map(|&i| Interaction::new(u as u32, i)));
    }
    let mut ds = InteractionDataset::from_splits(num_users, num_items, train, test)?;
    ds.seed = Some(seed);
    ds.train_ratio = Some(train_ratio);
    Ok(ds)
}

/// Split every user's interactions independently: `round(ratio·n)` edges
/// (at least one) go to train, the rest to test. Deterministic in `seed`.
pub fn split_per_user(raw: &RawEdges, train_ratio: f64, seed: u64) -> Result<InteractionDataset> {
    if raw.edges.is_empty() {
        return Err(DatasetError::Empty(PathBuf::from("<edges>")));
    }
    split_edges(raw.num_users(), raw.num_items(), &raw.edges, train_ratio, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SparsityGroup {
    Sparse,
    Normal,
    Popular,
}

impl SparsityGroup {
    pub const ALL: [SparsityGroup; 3] = [Self::Sparse, Self::Normal, Self::Popular];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sparse => "sparse",
            Self::Normal => "normal",
            Self::Popular => "popular",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityGroups {
    pub labels: Vec<SparsityGroup>,
    /// `(lower, upper)`: counts below `lower` are sparse, at or above
    /// `upper` popular.
    pub boundaries: (usize, usize),
    pub sizes: [usize; 3],
}

/// Label each count against strictly increasing `(lower, upper)` cut points.
pub fn groups_from_counts(counts: &[usize], boundaries: (usize, usize)) -> Result<SparsityGroups> {
    let (lo, hi) = boundaries;
    if lo >= hi {
        return Err(DatasetError::InvalidBoundaries(lo, hi));
    }
    let mut sizes = [0usize; 3];
    let labels = counts
        .iter()
        .map(|&c| {
            let g = if c < lo {
                SparsityGroup::Sparse
            } else if c < hi {
                SparsityGroup::Normal
            } else {
                SparsityGroup::Popular
            };
            sizes[g as usize] += 1;
            g
        })
        .collect();
    Ok(SparsityGroups {
        labels,
        boundaries,
        sizes,
    })
}

/// Tertile cut points of the train degree distribution.
pub fn tertile_boundaries(counts: &[usize]) -> (usize, usize) {
    if counts.is_empty() {
        return (1, 2);
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let lo = sorted[sorted.len() / 3];
    let hi = sorted[(2 * sorted.len()) / 3].max(lo + 1);
    (lo, hi)
}

/// Group users by train interaction count. `None` uses tertiles.
pub fn sparsity_groups(
    ds: &InteractionDataset,
    boundaries: Option<(usize, usize)>,
) -> Result<SparsityGroups> {
    let counts: Vec<usize> = (0..ds.num_users()).map(|u| ds.user_degree(u)).collect();
    let b = boundaries.unwrap_or_else(|| tertile_boundaries(&counts));
    groups_from_counts(&counts, b)
}

/// Add `round(ratio·|train|)` fake train edges drawn uniformly from cells
/// that are neither train nor test edges. The test split is untouched.
pub fn inject_noise(ds: &InteractionDataset, ratio: f64, seed: u64) -> Result<InteractionDataset> {
    if !(ratio >= 0.0 && ratio.is_finite()) {
        return Err(DatasetError::InvalidNoiseRatio(ratio));
    }
    let requested = (ratio * ds.train.len() as f64).round() as usize;
    if requested == 0 {
        return Ok(ds.clone());
    }
    let cells = ds.num_users * ds.num_items;
    let key = |e: &Interaction| e.user as usize * ds.num_items + e.item as usize;
    let mut occupied: HashSet<usize> = ds.train.iter().chain(&ds.test).map(key).collect();
    let available = cells - occupied.len();
    if requested > available {
        return Err(DatasetError::InsufficientCells {
            requested,
            available,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise = Vec::with_capacity(requested);
    if requested * 4 <= available {
        while noise.len() < requested {
            let c = rng.gen_range(0..cells);
            if occupied.insert(c) {
                noise.push(c);
            }
        }
    } else {
        let mut empty: Vec<usize> = (0..cells).filter(|c| !occupied.contains(c)).collect();
        let (chosen, _) = empty.partial_shuffle(&mut rng, requested);
        noise.extend_from_slice(chosen);
    }
    let noise: Vec<Interaction> = noise
        .into_iter()
        .map(|c| Interaction::new((c / ds.num_items) as u32, (c % ds.num_items) as u32))
        .collect();

    let mut train = ds.train.clone();
    train.extend_from_slice(&noise);
    let mut out = InteractionDataset::from_splits(ds.num_users, ds.num_items, train, ds.test.clone())?;
    let mut injected = ds.injected.clone();
    injected.extend(noise);
    injected.sort_unstable();
    out.injected = injected;
    out.seed = ds.seed;
    out.train_ratio = ds.train_ratio;
    out.cold_start_dropped = ds.cold_start_dropped;
    Ok(out)
}
