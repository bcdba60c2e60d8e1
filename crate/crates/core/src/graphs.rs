//! Propagation graphs: the normalized user-item bipartite graph and the
//! symmetrized multimodal kNN item-item similarity graph.
//!
//! Both graphs are stored in compressed sparse row form and are symmetric
//! with non-negative weights. The SPGR binary format caches similarity
//! graphs between runs: magic `SPGR`, u32 LE node count, u64 LE nnz, then
//! u64 LE row offsets (n+1), u32 LE column indices, f64 LE values.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{InteractionDataset, ModalityFeatures};
use crate::error::{Error, Result};
use crate::mat::{dot, Mat};

/// Square symmetric sparse matrix in CSR form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsePropagationGraph {
    n: usize,
    offsets: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparsePropagationGraph {
    /// Builds a CSR graph from an unordered edge list and validates the
    /// structural invariants (square, sorted columns, symmetric,
    /// non-negative finite weights).
    pub fn from_edges(n: usize, edges: &[(u32, u32, f64)]) -> Result<Self> {
        let mut offsets = vec![0usize; n + 1];
        for &(r, _, _) in edges {
            offsets[r as usize + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor = offsets.clone();
        let mut indices = vec![0u32; edges.len()];
        let mut values = vec![0.0; edges.len()];
        for &(r, c, v) in edges {
            let pos = cursor[r as usize];
            indices[pos] = c;
            values[pos] = v;
            cursor[r as usize] += 1;
        }
        // sort columns within each row
        for i in 0..n {
            let (lo, hi) = (offsets[i], offsets[i + 1]);
            let mut row: Vec<(u32, f64)> = indices[lo..hi]
                .iter()
                .copied()
                .zip(values[lo..hi].iter().copied())
                .collect();
            row.sort_unstable_by_key(|&(c, _)| c);
            for (k, (c, v)) in row.into_iter().enumerate() {
                indices[lo + k] = c;
                values[lo + k] = v;
            }
        }
        let graph = SparsePropagationGraph {
            n,
            offsets,
            indices,
            values,
        };
        graph.validate()?;
        Ok(graph)
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        SparsePropagationGraph {
            n,
            offsets: (0..=n).collect(),
            indices: (0..n as u32).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn dimension(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Stored entries of row `i` as parallel (columns, values) slices.
    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let (lo, hi) = (self.offsets[i], self.offsets[i + 1]);
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    pub fn value_at(&self, i: usize, j: u32) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(pos) => vals[pos],
            Err(_) => 0.0,
        }
    }

    /// True when the graph is exactly the identity matrix. Stepwise
    /// convolutions short-circuit in that case: every propagation power is
    /// the input itself, and row-stochastic layer weights make the
    /// convolution the identity map.
    pub fn is_identity(&self) -> bool {
        self.nnz() == self.n
            && self
                .indices
                .iter()
                .enumerate()
                .all(|(i, &c)| c as usize == i)
            && self.values.iter().all(|&v| v == 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.offsets.len() != self.n + 1 || *self.offsets.last().unwrap() != self.indices.len()
        {
            return Err(Error::Shape("inconsistent CSR offsets".into()));
        }
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for w in cols.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::Shape(format!(
                        "row {i} columns not strictly increasing"
                    )));
                }
            }
            for (&c, &v) in cols.iter().zip(vals) {
                if c as usize >= self.n {
                    return Err(Error::Shape(format!("row {i} column {c} out of range")));
                }
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Shape(format!(
                        "row {i} column {c} has invalid weight {v}"
                    )));
                }
                if (self.value_at(c as usize, i as u32) - v).abs() > 1e-12 {
                    return Err(Error::Shape(format!(
                        "asymmetric entry at ({i}, {c})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sparse-matrix x dense-matrix product. Each output row accumulates in
    /// CSR order, so the result is bitwise independent of the parallelism.
    pub fn propagate(&self, matrix: &Mat) -> Result<Mat> {
        let mut out = Mat::zeros(matrix.rows(), matrix.cols());
        self.propagate_into(matrix, &mut out)?;
        Ok(out)
    }

    /// As [`propagate`](Self::propagate), writing into an existing buffer.
    pub fn propagate_into(&self, matrix: &Mat, out: &mut Mat) -> Result<()> {
        if matrix.rows() != self.n {
            return Err(Error::Shape(format!(
                "matrix has {} rows, graph has {} nodes",
                matrix.rows(),
                self.n
            )));
        }
        assert_eq!(out.rows(), matrix.rows());
        assert_eq!(out.cols(), matrix.cols());
        let cols = matrix.cols();
        out.as_mut_slice()
            .par_chunks_mut(cols)
            .enumerate()
            .for_each(|(i, dst)| {
                dst.fill(0.0);
                let (row_cols, row_vals) = self.row(i);
                for (&c, &v) in row_cols.iter().zip(row_vals) {
                    let src = matrix.row(c as usize);
                    for k in 0..cols {
                        dst[k] += v * src[k];
                    }
                }
            });
        Ok(())
    }

    /// Dense copy, for oracle comparisons in tests.
    pub fn to_dense(&self) -> Mat {
        let mut m = Mat::zeros(self.n, self.n);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                m.set(i, c as usize, v);
            }
        }
        m
    }

    /// Writes the graph in SPGR form.
    pub fn write_spgr(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(b"SPGR").map_err(io)?;
        w.write_all(&(self.n as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.nnz() as u64).to_le_bytes()).map_err(io)?;
        for &o in &self.offsets {
            w.write_all(&(o as u64).to_le_bytes()).map_err(io)?;
        }
        for &c in &self.indices {
            w.write_all(&c.to_le_bytes()).map_err(io)?;
        }
        for &v in &self.values {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Reads a graph written by [`write_spgr`](Self::write_spgr) and
    /// re-validates all structural invariants.
    pub fn read_spgr(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != b"SPGR" {
            return Err(Error::format(path, "bad magic, expected SPGR"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
        let n = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
        let nnz = u64::from_le_bytes(b8) as usize;
        let mut offsets = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            r.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
            offsets.push(u64::from_le_bytes(b8) as usize);
        }
        let mut indices = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            r.read_exact(&mut b4).map_err(|e| Error::io(path, e))?;
            indices.push(u32::from_le_bytes(b4));
        }
        let mut values = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            r.read_exact(&mut b8).map_err(|e| Error::io(path, e))?;
            values.push(f64::from_le_bytes(b8));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::format(path, "trailing bytes after payload"));
        }
        let graph = SparsePropagationGraph {
            n,
            offsets,
            indices,
            values,
        };
        graph
            .validate()
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(graph)
    }
}

/// Symmetric sqrt normalization D^{-1/2} M D^{-1/2} of a weighted edge
/// list, with D taken from row sums.
fn sqrt_normalize(n: usize, edges: &[(u32, u32, f64)]) -> Result<SparsePropagationGraph> {
    let mut degree = vec![0.0f64; n];
    for &(r, _, v) in edges {
        degree[r as usize] += v;
    }
    let inv_sqrt: Vec<f64> = degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();
    let normalized: Vec<(u32, u32, f64)> = edges
        .iter()
        .map(|&(r, c, v)| (r, c, v * inv_sqrt[r as usize] * inv_sqrt[c as usize]))
        .collect();
    SparsePropagationGraph::from_edges(n, &normalized)
}

/// Builds the symmetric sqrt-normalized adjacency of the user-item
/// bipartite graph over train interactions. Users occupy node indices
/// `[0, |U|)` and items `[|U|, |U|+|I|)`.
pub fn build_bipartite_graph(ds: &InteractionDataset) -> Result<SparsePropagationGraph> {
    if ds.train.is_empty() {
        return Err(Error::Degenerate("no train interactions".into()));
    }
    let n = ds.num_users + ds.num_items;
    let mut degree = vec![0usize; n];
    let mut edges = Vec::with_capacity(ds.train.len() * 2);
    for &(u, i) in &ds.train {
        let iu = u;
        let ii = ds.num_users as u32 + i;
        edges.push((iu, ii, 1.0));
        edges.push((ii, iu, 1.0));
        degree[iu as usize] += 1;
        degree[ii as usize] += 1;
    }
    if let Some(node) = degree.iter().position(|&d| d == 0) {
        return Err(Error::Degenerate(format!(
            "node {node} has zero degree; k-core filtering should prevent this"
        )));
    }
    sqrt_normalize(n, &edges)
}

/// Per-item neighbor lists for one modality.
pub type NeighborLists = Vec<Vec<u32>>;

/// For each item, the `k` other items with largest cosine similarity,
/// ties broken toward the smaller item index. Exact blocked brute force;
/// cosines accumulate in f64 regardless of the storage precision.
pub fn knn_neighbors(features: &ModalityFeatures, k: usize) -> Result<NeighborLists> {
    let n = features.num_items();
    if k == 0 || k >= n {
        return Err(Error::Config(format!(
            "k = {k} must satisfy 1 <= k < {n} items"
        )));
    }
    let mut normalized = features.matrix.clone();
    let zero_rows = normalized.normalize_rows();
    if zero_rows > 0 {
        log::warn!(
            "{zero_rows} zero-norm feature rows in modality {}; they score cosine 0 everywhere",
            features.modality_id
        );
    }
    let lists: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let fi = normalized.row(i);
            let mut sims: Vec<(f64, u32)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dot(fi, normalized.row(j)), j as u32))
                .collect();
            // descending similarity, ascending index on ties
            let cmp = |a: &(f64, u32), b: &(f64, u32)| {
                b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
            };
            sims.select_nth_unstable_by(k - 1, cmp);
            sims.truncate(k);
            sims.sort_unstable_by(cmp);
            sims.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    Ok(lists)
}

/// Raw symmetric similarity counts: how many modalities name `j` a
/// neighbor of `i`, symmetrized by taking the max of the two orientations.
/// Entries lie in `{0, 1, ..., num_modalities}` with a zero diagonal.
pub fn similarity_counts(neighbor_lists: &[NeighborLists]) -> Result<SparsePropagationGraph> {
    let n = neighbor_lists
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Config("no modalities given".into()))?;
    if neighbor_lists.iter().any(|l| l.len() != n) {
        return Err(Error::Shape(
            "neighbor lists index different item universes".into(),
        ));
    }
    let mut counts: HashMap<(u32, u32), u32> = HashMap::new();
    for lists in neighbor_lists {
        for (i, neighbors) in lists.iter().enumerate() {
            for &j in neighbors {
                if j as usize != i {
                    *counts.entry((i as u32, j)).or_default() += 1;
                }
            }
        }
    }
    let mut edges = Vec::new();
    let mut seen: HashMap<(u32, u32), f64> = HashMap::new();
    for (&(i, j), &c_ij) in &counts {
        let key = (i.min(j), i.max(j));
        let c_ji = counts.get(&(j, i)).copied().unwrap_or(0);
        seen.entry(key).or_insert(c_ij.max(c_ji) as f64);
    }
    for (&(i, j), &s) in &seen {
        edges.push((i, j, s));
        edges.push((j, i, s));
    }
    SparsePropagationGraph::from_edges(n, &edges)
}

/// Aggregates per-modality neighbor lists into the symmetric
/// sqrt-normalized similarity graph.
pub fn build_similarity_graph(
    neighbor_lists: &[NeighborLists],
) -> Result<SparsePropagationGraph> {
    let counts = similarity_counts(neighbor_lists)?;
    let mut edges = Vec::with_capacity(counts.nnz());
    for i in 0..counts.dimension() {
        let (cols, vals) = counts.row(i);
        for (&c, &v) in cols.iter().zip(vals) {
            edges.push((i as u32, c, v));
        }
    }
    sqrt_normalize(counts.dimension(), &edges)
}
