//! Embedding initialization: whitening of modality features for items,
//! mean pooling for users, plus the shared k-means kernel.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{InteractionDataset, ModalityFeatures};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::{stream_rng, Stream};

/// User and item embedding blocks. Concatenation order is users first,
/// then items, matching the bipartite graph layout.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub users: Mat,
    pub items: Mat,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.users.cols()
    }

    /// Users-then-items stacked matrix.
    pub fn concatenated(&self) -> Mat {
        Mat::vstack(&self.users, &self.items).expect("blocks share the embedding dimension")
    }

    pub fn is_finite(&self) -> bool {
        self.users.is_finite() && self.items.is_finite()
    }
}

/// How multiple modalities are combined before whitening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WhitenStrategy {
    /// Row-normalize each modality, concatenate columns, whiten jointly.
    ConcatThenWhiten,
    /// Whiten each modality separately to a share of `d`, then concatenate.
    WhitenThenConcat,
}

impl Default for WhitenStrategy {
    fn default() -> Self {
        WhitenStrategy::ConcatThenWhiten
    }
}

/// Oversampling columns for the randomized range finder.
const SVD_OVERSAMPLE: usize = 8;
/// Subspace (power) iterations for the randomized range finder.
const SVD_POWER_ITERS: usize = 4;
/// Singular values below `sigma_max * RANK_TOL` count as numerically zero.
const RANK_TOL: f64 = 1e-10;

fn to_dmatrix(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_iterator(m.rows(), m.cols(), m.as_slice().iter().copied())
}

/// Top-`d` left singular vectors of `m` via randomized subspace iteration.
/// Columns beyond the numeric rank come back as zeros; the second return
/// value is the number of zeroed columns.
fn truncated_left_singular(m: &DMatrix<f64>, d: usize, seed: u64) -> (DMatrix<f64>, usize) {
    let (n, cols) = (m.nrows(), m.ncols());
    let samples = (d + SVD_OVERSAMPLE).min(n.min(cols));
    let mut rng = stream_rng(seed, Stream::WhitenInit);
    let omega = DMatrix::from_fn(cols, samples, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut q = (m * omega).qr().q();
    for _ in 0..SVD_POWER_ITERS {
        let z = (m.transpose() * &q).qr().q();
        q = (m * z).qr().q();
    }
    // small projected matrix carries the singular structure
    let b = q.transpose() * m;
    let svd = b.svd(true, false);
    let u_small = svd.u.expect("left singular vectors requested");
    let u = &q * u_small;
    let sigma_max = svd.singular_values.max();
    let mut out = DMatrix::zeros(n, d);
    let mut zeroed = 0;
    for j in 0..d {
        if j < samples && svd.singular_values[j] > sigma_max * RANK_TOL {
            out.set_column(j, &u.column(j));
        } else {
            zeroed += 1;
        }
    }
    (out, zeroed)
}

/// Fixes the sign of each column so its largest-magnitude entry is
/// positive, making runs reproducible bit-for-bit.
fn fix_column_signs(u: &mut DMatrix<f64>) {
    for mut col in u.column_iter_mut() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
        }
    }
}

fn whiten_single(matrix: &Mat, d: usize, seed: u64) -> Result<Mat> {
    let n = matrix.rows();
    // column-mean centering
    let means = matrix.col_means();
    let mut centered = to_dmatrix(matrix);
    for j in 0..centered.ncols() {
        let mu = means[j];
        centered.column_mut(j).iter_mut().for_each(|v| *v -= mu);
    }
    let (mut u, zeroed) = truncated_left_singular(&centered, d, seed);
    if zeroed > 0 {
        log::warn!(
            "requested {d} whitened dimensions but numeric rank allows {}; padding with zeros",
            d - zeroed
        );
    }
    fix_column_signs(&mut u);
    let scale = (n as f64).sqrt();
    let mut out = Mat::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            out.set(i, j, scale * u[(i, j)]);
        }
    }
    Ok(out)
}

/// Whitening-based item initialization: per-modality matrices are
/// row-L2-normalized, combined per `strategy`, column-mean-centered, and
/// the top-`d` left singular vectors are scaled by `sqrt(|I|)` so each
/// embedding column has unit variance.
pub fn whiten_init(
    features: &[ModalityFeatures],
    d: usize,
    strategy: WhitenStrategy,
    seed: u64,
) -> Result<Mat> {
    if features.is_empty() {
        return Err(Error::Config("no modality features given".into()));
    }
    let n = features[0].num_items();
    if features.iter().any(|f| f.num_items() != n) {
        return Err(Error::Shape("feature matrices are not row-aligned".into()));
    }
    let total_dim: usize = features.iter().map(ModalityFeatures::dim).sum();
    if d > n.min(total_dim) {
        return Err(Error::Config(format!(
            "d = {d} exceeds min(items = {n}, total feature dim = {total_dim})"
        )));
    }
    match strategy {
        WhitenStrategy::ConcatThenWhiten => {
            let mut combined = Mat::zeros(n, total_dim);
            let mut offset = 0;
            for f in features {
                let mut block = f.matrix.clone();
                block.normalize_rows();
                for i in 0..n {
                    combined.row_mut(i)[offset..offset + f.dim()].copy_from_slice(block.row(i));
                }
                offset += f.dim();
            }
            whiten_single(&combined, d, seed)
        }
        WhitenStrategy::WhitenThenConcat => {
            // first modality absorbs the remainder of d
            let m = features.len();
            let base = d / m;
            let mut dims = vec![base; m];
            dims[0] += d - base * m;
            if dims.iter().zip(features).any(|(&dm, f)| dm > f.dim().min(n)) {
                return Err(Error::Config(format!(
                    "d = {d} cannot be split across {m} modalities of these ranks"
                )));
            }
            let mut out = Mat::zeros(n, d);
            let mut offset = 0;
            for (f, &dm) in features.iter().zip(&dims) {
                if dm == 0 {
                    continue;
                }
                let mut block = f.matrix.clone();
                block.normalize_rows();
                let w = whiten_single(&block, dm, seed)?;
                for i in 0..n {
                    out.row_mut(i)[offset..offset + dm].copy_from_slice(w.row(i));
                }
                offset += dm;
            }
            Ok(out)
        }
    }
}

/// Mean pooling of each user's train-interacted item embeddings.
pub fn meanpool_user_init(item_embeddings: &Mat, ds: &InteractionDataset) -> Result<Mat> {
    if item_embeddings.rows() != ds.num_items {
        return Err(Error::Shape(format!(
            "{} embedding rows for {} items",
            item_embeddings.rows(),
            ds.num_items
        )));
    }
    let d = item_embeddings.cols();
    let mut users = Mat::zeros(ds.num_users, d);
    for (u, items) in ds.user_adjacency.iter().enumerate() {
        assert!(!items.is_empty(), "user {u} has no train interactions");
        let row = users.row_mut(u);
        for &i in items {
            let src = item_embeddings.row(i as usize);
            for k in 0..d {
                row[k] += src[k];
            }
        }
        let inv = 1.0 / items.len() as f64;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(users)
}

/// Random Gaussian initialization (std 0.01), the conventional starting
/// point for the collaborative-only baseline configurations.
pub fn random_init(num_users: usize, num_items: usize, d: usize, seed: u64) -> EmbeddingTable {
    let mut rng = stream_rng(seed, Stream::RandomInit);
    let mut draw = |rows: usize| {
        let data: Vec<f64> = (0..rows * d)
            .map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Mat::from_vec(rows, d, data).unwrap()
    };
    EmbeddingTable {
        users: draw(num_users),
        items: draw(num_items),
    }
}

/// K-means clustering result.
#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Mat,
    pub inertia: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// Lloyd iterations with k-means++ seeding. Callers wanting cosine
/// (spherical) behavior row-normalize `points` beforehand. Deterministic
/// under a fixed seed; an emptied cluster is re-seeded to the point
/// farthest from its assigned centroid.
pub fn kmeans(
    points: &Mat,
    clusters: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansResult> {
    let n = points.rows();
    let d = points.cols();
    if clusters == 0 || n < clusters {
        return Err(Error::Config(format!(
            "cannot form {clusters} clusters from {n} points"
        )));
    }
    let mut rng = stream_rng(seed, Stream::KMeans);

    // k-means++ seeding
    let mut centroids = Mat::zeros(clusters, d);
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut dist2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), centroids.row(0)))
        .collect();
    for c in 1..clusters {
        let total: f64 = dist2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in dist2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for i in 0..n {
            let d2 = squared_distance(points.row(i), centroids.row(c));
            if d2 < dist2[i] {
                dist2[i] = d2;
            }
        }
    }

    let mut assignments = vec![0usize; n];
    for _ in 0..max_iters {
        // assignment step
        for i in 0..n {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..clusters {
                let d2 = squared_distance(points.row(i), centroids.row(c));
                if d2 < best_d {
                    best_d = d2;
                    best = c;
                }
            }
            assignments[i] = best;
        }

        // update step
        let mut sums = Mat::zeros(clusters, d);
        let mut counts = vec![0usize; clusters];
        for i in 0..n {
            let c = assignments[i];
            counts[c] += 1;
            let row = sums.row_mut(c);
            for (k, v) in points.row(i).iter().enumerate() {
                row[k] += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..clusters {
            if counts[c] == 0 {
                // re-seed to the farthest point from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = squared_distance(points.row(a), centroids.row(assignments[a]));
                        let db = squared_distance(points.row(b), centroids.row(assignments[b]));
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                shift += squared_distance(centroids.row(c), points.row(far)).sqrt();
                centroids.row_mut(c).copy_from_slice(points.row(far));
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            let mut new_row = vec![0.0; d];
            for (k, v) in sums.row(c).iter().enumerate() {
                new_row[k] = v * inv;
            }
            shift += squared_distance(centroids.row(c), &new_row).sqrt();
            centroids.row_mut(c).copy_from_slice(&new_row);
        }
        if shift < tol {
            break;
        }
    }

    // final assignment against the last centroids
    let mut inertia = 0.0;
    for i in 0..n {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..clusters {
            let d2 = squared_distance(points.row(i), centroids.row(c));
            if d2 < best_d {
                best_d = d2;
                best = c;
            }
        }
        assignments[i] = best;
        inertia += best_d;
    }

    Ok(KMeansResult {
        assignments,
        centroids,
        inertia,
    })
}
