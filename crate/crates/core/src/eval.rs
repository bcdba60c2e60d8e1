//! Top-N ranking evaluation and the user-behavior uncertainty analysis.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};
use crate::init::kmeans;
use crate::mat::{dot, Mat};

/// Which interaction split supplies the relevant items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    Train,
    Valid,
    Test,
}

impl SplitChoice {
    pub fn pairs<'a>(&self, ds: &'a InteractionDataset) -> &'a [(u32, u32)] {
        match self {
            SplitChoice::Train => &ds.train,
            SplitChoice::Valid => &ds.valid,
            SplitChoice::Test => &ds.test,
        }
    }
}

impl std::str::FromStr for SplitChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitChoice::Train),
            "valid" => Ok(SplitChoice::Valid),
            "test" => Ok(SplitChoice::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Mean ranking metrics over evaluable users.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: SplitChoice,
    /// Cutoffs in the order given to [`rank_and_score`].
    pub cutoffs: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub num_evaluated_users: usize,
    pub num_skipped_users: usize,
}

impl EvalReport {
    pub fn recall_at(&self, n: usize) -> Option<f64> {
        self.cutoffs
            .iter()
            .position(|&c| c == n)
            .map(|p| self.recall[p])
    }

    pub fn ndcg_at(&self, n: usize) -> Option<f64> {
        self.cutoffs
            .iter()
            .position(|&c| c == n)
            .map(|p| self.ndcg[p])
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<10} {:>10} {:>10}",
            format!("{:?}", self.split).to_lowercase(),
            "Recall",
            "NDCG"
        )?;
        for (pos, &n) in self.cutoffs.iter().enumerate() {
            writeln!(
                f,
                "@{:<9} {:>10.4} {:>10.4}",
                n, self.recall[pos], self.ndcg[pos]
            )?;
        }
        write!(
            f,
            "users evaluated: {}, skipped (empty held-out): {}",
            self.num_evaluated_users, self.num_skipped_users
        )
    }
}

/// Ranking evaluation options.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub split: SplitChoice,
    pub cutoffs: Vec<usize>,
    /// Mask each user's train items to -inf before ranking (standard
    /// protocol; disable only for sanity runs).
    pub mask_train: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split: SplitChoice::Valid,
            cutoffs: vec![10, 20],
            mask_train: true,
        }
    }
}

/// Indices of the top `n` scores, ties broken toward the smaller index.
fn top_n_indices(scores: &[f64], n: usize) -> Vec<u32> {
    let mut order: Vec<u32> = (0..scores.len() as u32).collect();
    let cmp = |a: &u32, b: &u32| {
        scores[*b as usize]
            .partial_cmp(&scores[*a as usize])
            .unwrap()
            .then(a.cmp(b))
    };
    let n = n.min(order.len());
    if n < order.len() {
        order.select_nth_unstable_by(n - 1, cmp);
        order.truncate(n);
    }
    order.sort_unstable_by(cmp);
    order
}

/// Scores every item for each user with a non-empty held-out set by inner
/// product of latent representations, and reports mean Recall@N and NDCG@N.
///
/// `latent` is the users-then-items matrix produced by the forward
/// convolution. DCG uses the `1/log2(rank+1)` discount with rank starting
/// at 1; the ideal DCG places all relevant items at the top.
pub fn rank_and_score(
    latent: &Mat,
    ds: &InteractionDataset,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if latent.rows() != ds.num_users + ds.num_items {
        return Err(Error::Shape(format!(
            "latent has {} rows, dataset has {} nodes",
            latent.rows(),
            ds.num_users + ds.num_items
        )));
    }
    let mut relevant: Vec<Vec<u32>> = vec![Vec::new(); ds.num_users];
    for &(u, i) in options.split.pairs(ds) {
        relevant[u as usize].push(i);
    }
    for r in &mut relevant {
        r.sort_unstable();
    }
    let max_n = options.cutoffs.iter().copied().max().unwrap_or(0);
    if max_n == 0 {
        return Err(Error::Config("no cutoffs requested".into()));
    }

    let per_user: Vec<Option<(Vec<f64>, Vec<f64>)>> = (0..ds.num_users)
        .into_par_iter()
        .map(|u| {
            let rel = &relevant[u];
            if rel.is_empty() {
                return None;
            }
            let hu = latent.row(u);
            let mut scores: Vec<f64> = (0..ds.num_items)
                .map(|i| dot(hu, latent.row(ds.num_users + i)))
                .collect();
            if options.mask_train {
                for &i in &ds.user_adjacency[u] {
                    scores[i as usize] = f64::NEG_INFINITY;
                }
            }
            let top = top_n_indices(&scores, max_n);
            let mut recalls = Vec::with_capacity(options.cutoffs.len());
            let mut ndcgs = Vec::with_capacity(options.cutoffs.len());
            for &n in &options.cutoffs {
                let mut hits = 0usize;
                let mut dcg = 0.0;
                for (rank0, &item) in top.iter().take(n).enumerate() {
                    if rel.binary_search(&item).is_ok() {
                        hits += 1;
                        dcg += 1.0 / ((rank0 + 2) as f64).log2();
                    }
                }
                let ideal_hits = n.min(rel.len());
                let idcg: f64 = (0..ideal_hits)
                    .map(|r| 1.0 / ((r + 2) as f64).log2())
                    .sum();
                recalls.push(hits as f64 / rel.len() as f64);
                ndcgs.push(if idcg > 0.0 { dcg / idcg } else { 0.0 });
            }
            Some((recalls, ndcgs))
        })
        .collect();

    let mut recall = vec![0.0; options.cutoffs.len()];
    let mut ndcg = vec![0.0; options.cutoffs.len()];
    let mut evaluated = 0usize;
    for entry in per_user.iter().flatten() {
        evaluated += 1;
        for (acc, v) in recall.iter_mut().zip(&entry.0) {
            *acc += v;
        }
        for (acc, v) in ndcg.iter_mut().zip(&entry.1) {
            *acc += v;
        }
    }
    if evaluated > 0 {
        recall.iter_mut().for_each(|v| *v /= evaluated as f64);
        ndcg.iter_mut().for_each(|v| *v /= evaluated as f64);
    }
    Ok(EvalReport {
        split: options.split,
        cutoffs: options.cutoffs.clone(),
        recall,
        ndcg,
        num_evaluated_users: evaluated,
        num_skipped_users: ds.num_users - evaluated,
    })
}

/// Behavior uncertainty of one feature source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintyReport {
    pub source: String,
    pub clusters: usize,
    /// Mean Shannon entropy across users, in nats.
    pub mean_entropy: f64,
    pub per_user_entropy: Vec<f64>,
}

/// Shannon entropy (nats) of each user's train-interaction distribution
/// over the given item cluster labels.
pub fn user_entropy(
    assignments: &[usize],
    ds: &InteractionDataset,
    clusters: usize,
) -> Result<Vec<f64>> {
    if assignments.len() != ds.num_items {
        return Err(Error::Shape(format!(
            "{} labels for {} items",
            assignments.len(),
            ds.num_items
        )));
    }
    if let Some(&bad) = assignments.iter().find(|&&c| c >= clusters) {
        return Err(Error::Shape(format!(
            "label {bad} outside [0, {clusters})"
        )));
    }
    let mut out = Vec::with_capacity(ds.num_users);
    let mut counts = vec![0usize; clusters];
    for items in &ds.user_adjacency {
        counts.iter_mut().for_each(|c| *c = 0);
        for &i in items {
            counts[assignments[i as usize]] += 1;
        }
        let n_u = items.len() as f64;
        let mut h = 0.0;
        for &c in &counts {
            if c > 0 {
                let p = c as f64 / n_u;
                h -= p * p.ln();
            }
        }
        out.push(h);
    }
    Ok(out)
}

/// Clusters item rows (cosine: rows are L2-normalized before k-means) and
/// reports the mean behavior entropy across users.
pub fn behavior_uncertainty(
    features: &Mat,
    ds: &InteractionDataset,
    clusters: usize,
    seed: u64,
    source: &str,
) -> Result<UncertaintyReport> {
    if features.rows() != ds.num_items {
        return Err(Error::Shape(format!(
            "{} feature rows for {} items",
            features.rows(),
            ds.num_items
        )));
    }
    if clusters < 2 {
        return Err(Error::Config("need at least 2 clusters".into()));
    }
    let mut points = features.clone();
    points.normalize_rows();
    let km = kmeans(&points, clusters, seed, 100, 1e-6)?;
    let per_user = user_entropy(&km.assignments, ds, clusters)?;
    let mean = per_user.iter().sum::<f64>() / per_user.len().max(1) as f64;
    Ok(UncertaintyReport {
        source: source.to_string(),
        clusters,
        mean_entropy: mean,
        per_user_entropy: per_user,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// One user, `items` items; latent rows constructed so user scores are
    /// exactly `scores`.
    fn single_user_latent(scores: &[f64]) -> (Mat, InteractionDataset) {
        let items = scores.len();
        let mut rows = vec![vec![1.0]];
        for &s in scores {
            rows.push(vec![s]);
        }
        let latent = Mat::from_rows(&rows).unwrap();
        let ds = InteractionDataset {
            num_users: 1,
            num_items: items,
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
            user_adjacency: vec![Vec::new()],
            user_ids: vec!["u".into()],
            item_ids: (0..items).map(|i| i.to_string()).collect(),
        };
        (latent, ds)
    }

    #[test]
    fn recall_half_when_one_of_two_found() {
        let (latent, mut ds) = single_user_latent(&[
            10.0, 9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.4,
        ]);
        // relevant: item 0 (ranked 1st) and item 11 (ranked last)
        ds.test = vec![(0, 0), (0, 11)];
        let report = rank_and_score(
            &latent,
            &ds,
            &EvalOptions {
                split: SplitChoice::Test,
                cutoffs: vec![10],
                mask_train: true,
            },
        )
        .unwrap();
        assert!((report.recall[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ndcg_single_relevant_positions() {
        let (latent, mut ds) = single_user_latent(&[5.0, 4.0, 3.0, 2.0, 1.0]);
        ds.test = vec![(0, 0)];
        let r = rank_and_score(
            &latent,
            &ds,
            &EvalOptions {
                split: SplitChoice::Test,
                cutoffs: vec![10],
                mask_train: true,
            },
        )
        .unwrap();
        assert!((r.ndcg[0] - 1.0).abs() < 1e-12, "rank 1 gives ideal NDCG");

        ds.test = vec![(0, 1)];
        let r = rank_and_score(
            &latent,
            &ds,
            &EvalOptions {
                split: SplitChoice::Test,
                cutoffs: vec![10],
                mask_train: true,
            },
        )
        .unwrap();
        let expected = 1.0 / 3.0f64.log2();
        assert!((r.ndcg[0] - expected).abs() < 1e-12, "{}", r.ndcg[0]);
    }

    #[test]
    fn users_without_heldout_are_skipped_but_counted() {
        let latent = Mat::from_rows(&[
            vec![1.0],
            vec![1.0],
            vec![0.5],
            vec![0.2],
        ])
        .unwrap();
        let ds = InteractionDataset {
            num_users: 2,
            num_items: 2,
            train: vec![(0, 0), (1, 0), (1, 1)],
            valid: vec![(0, 1)],
            test: Vec::new(),
            user_adjacency: vec![vec![0], vec![0, 1]],
            user_ids: vec!["a".into(), "b".into()],
            item_ids: vec!["x".into(), "y".into()],
        };
        let r = rank_and_score(&latent, &ds, &EvalOptions::default()).unwrap();
        assert_eq!(r.num_evaluated_users, 1);
        assert_eq!(r.num_skipped_users, 1);
    }

    #[test]
    fn full_cutoff_without_masking_gives_recall_one() {
        let mut rng = crate::rng::stream_rng(12, crate::rng::Stream::Synthetic);
        let users = 7;
        let items = 9;
        let d = 3;
        let latent = Mat::from_rows(
            &(0..users + items)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let mut pairs = Vec::new();
        for u in 0..users as u32 {
            for i in 0..items as u32 {
                if rng.gen_bool(0.4) {
                    pairs.push((u, i));
                }
            }
            pairs.push((u, 0));
        }
        pairs.sort_unstable();
        pairs.dedup();
        let mut ds = InteractionDataset::from_indexed(users, items, pairs);
        // hold out one item per user as test
        let mut test = Vec::new();
        let mut train = Vec::new();
        for &(u, i) in &ds.train {
            if i == 0 {
                test.push((u, i));
            } else {
                train.push((u, i));
            }
        }
        ds.train = train;
        ds.test = test;
        ds.rebuild_adjacency();
        let r = rank_and_score(
            &latent,
            &ds,
            &EvalOptions {
                split: SplitChoice::Test,
                cutoffs: vec![items],
                mask_train: false,
            },
        )
        .unwrap();
        assert!((r.recall[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_match_brute_force_oracle() {
        let mut rng = crate::rng::stream_rng(13, crate::rng::Stream::Synthetic);
        for _ in 0..10 {
            let users = rng.gen_range(3..8);
            let items = rng.gen_range(8..20);
            let d = 4;
            let latent = Mat::from_rows(
                &(0..users + items)
                    .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            let mut train = Vec::new();
            let mut valid = Vec::new();
            for u in 0..users as u32 {
                for i in 0..items as u32 {
                    if rng.gen_bool(0.3) {
                        train.push((u, i));
                    } else if rng.gen_bool(0.2) {
                        valid.push((u, i));
                    }
                }
            }
            let mut ds = InteractionDataset::from_indexed(users, items, train);
            ds.valid = valid;
            let n = 5;
            let r = rank_and_score(
                &latent,
                &ds,
                &EvalOptions {
                    split: SplitChoice::Valid,
                    cutoffs: vec![n],
                    mask_train: true,
                },
            )
            .unwrap();

            // oracle: full stable sort per user, naive hit counting
            let mut rec_acc = 0.0;
            let mut ndcg_acc = 0.0;
            let mut count = 0usize;
            for u in 0..users {
                let rel: Vec<u32> = ds
                    .valid
                    .iter()
                    .filter(|&&(vu, _)| vu as usize == u)
                    .map(|&(_, i)| i)
                    .collect();
                if rel.is_empty() {
                    continue;
                }
                count += 1;
                let hu = latent.row(u);
                let mut scored: Vec<(f64, u32)> = (0..items)
                    .map(|i| {
                        let mut s = dot(hu, latent.row(users + i));
                        if ds.user_adjacency[u].contains(&(i as u32)) {
                            s = f64::NEG_INFINITY;
                        }
                        (s, i as u32)
                    })
                    .collect();
                scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                let mut hits = 0;
                let mut dcg = 0.0;
                for (rank0, &(_, item)) in scored.iter().take(n).enumerate() {
                    if rel.contains(&item) {
                        hits += 1;
                        dcg += 1.0 / ((rank0 + 2) as f64).log2();
                    }
                }
                let idcg: f64 = (0..n.min(rel.len()))
                    .map(|r| 1.0 / ((r + 2) as f64).log2())
                    .sum();
                rec_acc += hits as f64 / rel.len() as f64;
                ndcg_acc += dcg / idcg;
            }
            if count == 0 {
                continue;
            }
            assert!((r.recall[0] - rec_acc / count as f64).abs() <= 1e-12);
            assert!((r.ndcg[0] - ndcg_acc / count as f64).abs() <= 1e-12);
            assert_eq!(r.num_evaluated_users, count);
        }
    }

    #[test]
    fn monotone_score_transform_preserves_metrics() {
        let mut rng = crate::rng::stream_rng(14, crate::rng::Stream::Synthetic);
        let users = 5;
        let items = 12;
        let d = 3;
        let base = Mat::from_rows(
            &(0..users + items)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let mut train = Vec::new();
        let mut valid = Vec::new();
        for u in 0..users as u32 {
            for i in 0..items as u32 {
                if rng.gen_bool(0.3) {
                    train.push((u, i));
                } else if rng.gen_bool(0.25) {
                    valid.push((u, i));
                }
            }
            train.push((u, u));
        }
        train.sort_unstable();
        train.dedup();
        let mut ds = InteractionDataset::from_indexed(users, items, train);
        ds.valid = valid;
        let opts = EvalOptions::default();
        let r1 = rank_and_score(&base, &ds, &opts).unwrap();
        // positive affine transform of scores: scale every item row and add
        // a shared bias direction is not affine per user, so instead scale
        // all item rows by a positive constant (scores scale by the same)
        let mut scaled = base.clone();
        for i in 0..items {
            scaled
                .row_mut(users + i)
                .iter_mut()
                .for_each(|v| *v *= 3.5);
        }
        let r2 = rank_and_score(&scaled, &ds, &opts).unwrap();
        for p in 0..opts.cutoffs.len() {
            assert!((r1.recall[p] - r2.recall[p]).abs() < 1e-12);
            assert!((r1.ndcg[p] - r2.ndcg[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_degenerate_and_uniform() {
        // user 0: all items in cluster 0 -> H = 0
        // user 1: 8 interactions uniform over 4 clusters -> H = ln 4
        let assignments = vec![0, 0, 0, 0, 1, 1, 2, 2, 3, 3];
        let ds = InteractionDataset::from_indexed(
            2,
            10,
            vec![
                (0, 0), (0, 1), (0, 2), (0, 3),
                (1, 0), (1, 4), (1, 6), (1, 8),
                (1, 1), (1, 5), (1, 7), (1, 9),
            ],
        );
        let h = user_entropy(&assignments, &ds, 4).unwrap();
        assert!(h[0].abs() < 1e-15);
        assert!((h[1] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_bounds_hold() {
        let mut rng = crate::rng::stream_rng(15, crate::rng::Stream::Synthetic);
        let items = 40;
        let clusters = 6;
        let assignments: Vec<usize> =
            (0..items).map(|_| rng.gen_range(0..clusters)).collect();
        let mut pairs = Vec::new();
        for u in 0..10u32 {
            for i in 0..items as u32 {
                if rng.gen_bool(0.3) {
                    pairs.push((u, i));
                }
            }
            pairs.push((u, u));
        }
        pairs.sort_unstable();
        pairs.dedup();
        let ds = InteractionDataset::from_indexed(10, items, pairs);
        let h = user_entropy(&assignments, &ds, clusters).unwrap();
        for (u, &v) in h.iter().enumerate() {
            assert!(v >= 0.0 && v <= (clusters as f64).ln() + 1e-12, "user {u}: {v}");
        }
    }

    #[test]
    fn uncertainty_separates_clustered_from_uniform_behavior() {
        // items in 2 tight feature blobs; user A interacts inside one blob,
        // user B across both
        let mut rows = Vec::new();
        for i in 0..10 {
            if i < 5 {
                rows.push(vec![1.0, 0.01 * i as f64]);
            } else {
                rows.push(vec![-1.0, 0.01 * i as f64]);
            }
        }
        let features = Mat::from_rows(&rows).unwrap();
        let ds = InteractionDataset::from_indexed(
            2,
            10,
            vec![
                (0, 0), (0, 1), (0, 2), (0, 3),
                (1, 0), (1, 5), (1, 1), (1, 6),
            ],
        );
        let r = behavior_uncertainty(&features, &ds, 2, 3, "toy").unwrap();
        assert!(r.per_user_entropy[0] < 1e-9);
        assert!((r.per_user_entropy[1] - 2.0f64.ln()).abs() < 1e-9);
    }
}
