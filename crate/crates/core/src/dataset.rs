//! Interaction data and precomputed modality features.
//!
//! Interactions arrive as a `user<TAB>item` TSV and go through iterative
//! k-core filtering before raw IDs are mapped to dense indices. Feature
//! matrices arrive in the FMAT binary format described below.
//!
//! FMAT layout: magic `FMAT`, u32 LE row count, u32 LE column count, then
//! row-major f32 LE payload. File length is enforced exactly.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::{stream_rng, Stream};

/// A user-item interaction pair in dense index space.
pub type Interaction = (u32, u32);

/// Indexed interaction data with train/valid/test splits.
///
/// Users and items carry dense 0-based indices. `user_adjacency[u]` is the
/// sorted set of items user `u` interacted with in the train split.
#[derive(Debug, Clone)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub train: Vec<Interaction>,
    pub valid: Vec<Interaction>,
    pub test: Vec<Interaction>,
    pub user_adjacency: Vec<Vec<u32>>,
    /// Raw user IDs by dense index, in first-appearance order.
    pub user_ids: Vec<String>,
    /// Raw item IDs by dense index, in first-appearance order.
    pub item_ids: Vec<String>,
}

impl InteractionDataset {
    /// Builds a dataset from already-indexed interactions, all assigned to
    /// the train split. Used by synthetic generators and tests.
    pub fn from_indexed(num_users: usize, num_items: usize, train: Vec<Interaction>) -> Self {
        let user_ids = (0..num_users).map(|u| u.to_string()).collect();
        let item_ids = (0..num_items).map(|i| i.to_string()).collect();
        let mut ds = InteractionDataset {
            num_users,
            num_items,
            train,
            valid: Vec::new(),
            test: Vec::new(),
            user_adjacency: Vec::new(),
            user_ids,
            item_ids,
        };
        ds.rebuild_adjacency();
        ds
    }

    pub fn num_interactions(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.num_interactions() as f64 / (self.num_users * self.num_items) as f64
    }

    /// Recomputes `user_adjacency` from the train split.
    pub fn rebuild_adjacency(&mut self) {
        let mut adj = vec![Vec::new(); self.num_users];
        for &(u, i) in &self.train {
            adj[u as usize].push(i);
        }
        for items in &mut adj {
            items.sort_unstable();
            items.dedup();
        }
        self.user_adjacency = adj;
    }

    /// Checks index bounds, split disjointness and train coverage.
    pub fn validate(&self) -> Result<()> {
        for &(u, i) in self.train.iter().chain(&self.valid).chain(&self.test) {
            if u as usize >= self.num_users || i as usize >= self.num_items {
                return Err(Error::Shape(format!(
                    "interaction ({u}, {i}) outside {}x{} universe",
                    self.num_users, self.num_items
                )));
            }
        }
        let train: HashSet<Interaction> = self.train.iter().copied().collect();
        let valid: HashSet<Interaction> = self.valid.iter().copied().collect();
        let test: HashSet<Interaction> = self.test.iter().copied().collect();
        if train.intersection(&valid).next().is_some()
            || train.intersection(&test).next().is_some()
            || valid.intersection(&test).next().is_some()
        {
            return Err(Error::Degenerate("splits are not disjoint".into()));
        }
        let mut user_seen = vec![false; self.num_users];
        let mut item_seen = vec![false; self.num_items];
        for &(u, i) in &self.train {
            user_seen[u as usize] = true;
            item_seen[i as usize] = true;
        }
        if !user_seen.iter().all(|&s| s) {
            return Err(Error::Degenerate("user without train interaction".into()));
        }
        if !item_seen.iter().all(|&s| s) {
            return Err(Error::Degenerate("item without train interaction".into()));
        }
        Ok(())
    }
}

/// Reads raw `user<TAB>item` pairs. Lines starting with `#` are skipped;
/// duplicate pairs collapse to one.
fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let (user, item) = match (fields.next(), fields.next(), fields.next()) {
            (Some(u), Some(i), None) if !u.is_empty() && !i.is_empty() => (u, i),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: "expected exactly two tab-separated fields".into(),
                })
            }
        };
        let pair = (user.to_string(), item.to_string());
        if seen.insert(pair.clone()) {
            pairs.push(pair);
        }
    }
    Ok(pairs)
}

/// Iterative k-core filter over raw pairs: removes users and items with
/// fewer than `min_degree` interactions until a fixpoint is reached.
fn k_core(pairs: Vec<(String, String)>, min_degree: usize) -> Vec<(String, String)> {
    let mut pairs = pairs;
    loop {
        let mut user_deg: HashMap<&str, usize> = HashMap::new();
        let mut item_deg: HashMap<&str, usize> = HashMap::new();
        for (u, i) in &pairs {
            *user_deg.entry(u).or_default() += 1;
            *item_deg.entry(i).or_default() += 1;
        }
        let before = pairs.len();
        let keep: Vec<bool> = pairs
            .iter()
            .map(|(u, i)| {
                user_deg[u.as_str()] >= min_degree && item_deg[i.as_str()] >= min_degree
            })
            .collect();
        if keep.iter().all(|&k| k) {
            return pairs;
        }
        let mut idx = 0;
        pairs.retain(|_| {
            let k = keep[idx];
            idx += 1;
            k
        });
        if pairs.len() == before {
            return pairs;
        }
    }
}

/// Loads interactions from a TSV file, applies iterative k-core filtering
/// with threshold `min_degree`, and maps raw IDs to dense indices in
/// first-appearance order. All interactions land in the train split;
/// see [`split_interactions`] for redistribution.
pub fn load_interactions(path: &Path, min_degree: usize) -> Result<InteractionDataset> {
    let pairs = read_pairs(path)?;
    let filtered = k_core(pairs, min_degree);
    if filtered.is_empty() {
        return Err(Error::Degenerate(format!(
            "no interactions survive {min_degree}-core filtering of {}",
            path.display()
        )));
    }
    let mut user_index: HashMap<String, u32> = HashMap::new();
    let mut item_index: HashMap<String, u32> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut train = Vec::with_capacity(filtered.len());
    for (u, i) in filtered {
        let next_u = user_index.len() as u32;
        let uid = *user_index.entry(u.clone()).or_insert_with(|| {
            user_ids.push(u);
            next_u
        });
        let next_i = item_index.len() as u32;
        let iid = *item_index.entry(i.clone()).or_insert_with(|| {
            item_ids.push(i);
            next_i
        });
        train.push((uid, iid));
    }
    let mut ds = InteractionDataset {
        num_users: user_ids.len(),
        num_items: item_ids.len(),
        train,
        valid: Vec::new(),
        test: Vec::new(),
        user_adjacency: Vec::new(),
        user_ids,
        item_ids,
    };
    ds.rebuild_adjacency();
    Ok(ds)
}

/// Number of interactions assigned to (train, valid, test) for a user with
/// `n` interactions: floor each share, then hand leftovers to the largest
/// fractional remainders, ties resolved in train > valid > test order.
/// Users with fewer than 3 interactions keep everything in train.
pub fn split_counts(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    if n < 3 {
        return (n, 0, 0);
    }
    let shares = [ratios.0, ratios.1, ratios.2];
    let exact: Vec<f64> = shares.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    // larger remainder first; equal remainders fall back to split order
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &slot in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        counts[slot] += 1;
        leftover -= 1;
    }
    (counts[0], counts[1], counts[2])
}

/// Per-user random split at the given ratios, deterministic under
/// `(dataset, ratios, seed)`. Items that would lose every train occurrence
/// get their held-out interactions moved back to train.
pub fn split_interactions(
    ds: &InteractionDataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<InteractionDataset> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 || ratios.0 <= 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(Error::Config(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut per_user: Vec<Vec<u32>> = vec![Vec::new(); ds.num_users];
    for &(u, i) in ds.train.iter().chain(&ds.valid).chain(&ds.test) {
        per_user[u as usize].push(i);
    }
    let mut rng = stream_rng(seed, Stream::Split);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for (u, items) in per_user.iter_mut().enumerate() {
        items.sort_unstable();
        items.shuffle(&mut rng);
        let (n_train, n_valid, _n_test) = split_counts(items.len(), ratios);
        for (pos, &i) in items.iter().enumerate() {
            let pair = (u as u32, i);
            if pos < n_train {
                train.push(pair);
            } else if pos < n_train + n_valid {
                valid.push(pair);
            } else {
                test.push(pair);
            }
        }
    }
    // items stranded outside train get all their held-out pairs moved back
    let mut item_train_deg = vec![0usize; ds.num_items];
    for &(_, i) in &train {
        item_train_deg[i as usize] += 1;
    }
    let stranded: HashSet<u32> = (0..ds.num_items as u32)
        .filter(|&i| item_train_deg[i as usize] == 0)
        .collect();
    if !stranded.is_empty() {
        let mut moved = 0usize;
        for split in [&mut valid, &mut test] {
            let mut kept = Vec::with_capacity(split.len());
            for &(u, i) in split.iter() {
                if stranded.contains(&i) {
                    train.push((u, i));
                    moved += 1;
                } else {
                    kept.push((u, i));
                }
            }
            *split = kept;
        }
        log::warn!(
            "moved {moved} held-out interactions of {} cold items back to train",
            stranded.len()
        );
    }
    let mut out = InteractionDataset {
        num_users: ds.num_users,
        num_items: ds.num_items,
        train,
        valid,
        test,
        user_adjacency: Vec::new(),
        user_ids: ds.user_ids.clone(),
        item_ids: ds.item_ids.clone(),
    };
    out.rebuild_adjacency();
    Ok(out)
}

/// A dense item-feature matrix for one modality.
#[derive(Debug, Clone)]
pub struct ModalityFeatures {
    pub modality_id: String,
    pub matrix: Mat,
}

impl ModalityFeatures {
    pub fn num_items(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

const FMAT_MAGIC: &[u8; 4] = b"FMAT";

/// Loads an FMAT feature file, checking the row count against
/// `expected_items` and rejecting non-finite entries.
pub fn load_features(
    path: &Path,
    modality_id: &str,
    expected_items: usize,
) -> Result<ModalityFeatures> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|e| Error::io(path, e))?;
    if &magic != FMAT_MAGIC {
        return Err(Error::format(path, "bad magic, expected FMAT"));
    }
    let mut u32buf = [0u8; 4];
    reader
        .read_exact(&mut u32buf)
        .map_err(|e| Error::io(path, e))?;
    let rows = u32::from_le_bytes(u32buf) as usize;
    reader
        .read_exact(&mut u32buf)
        .map_err(|e| Error::io(path, e))?;
    let cols = u32::from_le_bytes(u32buf) as usize;
    if rows != expected_items {
        return Err(Error::format(
            path,
            format!("header declares {rows} rows but the dataset has {expected_items} items"),
        ));
    }
    let mut payload = vec![0u8; rows * cols * 4];
    reader
        .read_exact(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(path, "trailing bytes after payload"));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let matrix = Mat::from_vec(rows, cols, data)?;
    if let Some((row, col)) = matrix.find_non_finite() {
        return Err(Error::NonFinite { row, col });
    }
    Ok(ModalityFeatures {
        modality_id: modality_id.to_string(),
        matrix,
    })
}

/// Writes a matrix as an FMAT file (f32 payload).
pub fn write_fmat(path: &Path, matrix: &Mat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(FMAT_MAGIC).map_err(io)?;
    w.write_all(&(matrix.rows() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(matrix.cols() as u32).to_le_bytes()).map_err(io)?;
    for v in matrix.as_slice() {
        w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes index-mapped interactions as `user<TAB>item` TSV.
pub fn write_interactions_tsv(path: &Path, pairs: &[Interaction]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for &(u, i) in pairs {
        writeln!(w, "{u}\t{i}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads index-mapped interactions written by [`write_interactions_tsv`].
pub fn read_indexed_tsv(path: &Path) -> Result<Vec<Interaction>> {
    let pairs = read_pairs(path)?;
    pairs
        .into_iter()
        .enumerate()
        .map(|(lineno, (u, i))| {
            let parse = |s: &str| {
                s.parse::<u32>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: format!("expected dense index, got {s:?}"),
                })
            };
            Ok((parse(&u)?, parse(&i)?))
        })
        .collect()
}
