//! Synthetic clustered datasets for experiments, smoke tests and benches.
//!
//! Items belong to latent clusters and carry a continuous intra-cluster
//! offset. Each user prefers a few clusters and, within them, items whose
//! offsets align with the user's taste vector. Modality features encode
//! the cluster center plus a projection of the offset, corrupted by
//! Gaussian noise — so behavior is (noisily) predictable from features at
//! two scales: coarse cluster membership and fine intra-cluster geometry.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{InteractionDataset, ModalityFeatures};
use crate::mat::Mat;
use crate::rng::{stream_rng, Stream};

/// One synthetic modality: dimensionality and noise level around the
/// encoded signal (cluster centers are standard normal draws, so noise
/// near 1.0 makes the modality barely informative).
#[derive(Debug, Clone)]
pub struct SynthModality {
    pub id: String,
    pub dim: usize,
    pub noise: f64,
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub num_users: usize,
    pub num_items: usize,
    pub num_clusters: usize,
    pub interactions_per_user: usize,
    /// Probability an interaction is drawn from the user's preferred
    /// clusters rather than a uniform cluster.
    pub affinity: f64,
    pub preferred_clusters: usize,
    /// Dimension of the shared intra-cluster offset space.
    pub latent_dim: usize,
    /// Feature-space magnitude of the offset signal relative to the
    /// cluster centers; 0 disables intra-cluster structure.
    pub intra_scale: f64,
    /// Softmax sharpness of taste-offset alignment when picking an item
    /// within a cluster; 0 picks uniformly.
    pub intra_sharpness: f64,
    pub modalities: Vec<SynthModality>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    /// All interactions in the train split; split downstream.
    pub dataset: InteractionDataset,
    pub features: Vec<ModalityFeatures>,
    pub item_clusters: Vec<usize>,
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Mat::from_vec(rows, cols, data).unwrap()
}

/// Pure Gaussian noise features, the uninformative control.
pub fn noise_features(num_items: usize, dim: usize, seed: u64) -> ModalityFeatures {
    let mut rng = stream_rng(seed, Stream::Uncertainty);
    ModalityFeatures {
        modality_id: "random".into(),
        matrix: gaussian_matrix(&mut rng, num_items, dim, 1.0),
    }
}

/// Draws an index from unnormalized log-weights.
fn sample_softmax(rng: &mut ChaCha8Rng, logits: &[f64]) -> usize {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut target = rng.gen_range(0.0..total);
    for (i, &w) in weights.iter().enumerate() {
        if target < w {
            return i;
        }
        target -= w;
    }
    weights.len() - 1
}

/// Generates a clustered dataset. Deterministic under `(spec, seed)`.
pub fn generate(spec: &SynthSpec, seed: u64) -> SynthData {
    assert!(spec.num_clusters >= 1 && spec.num_clusters <= spec.num_items);
    assert!(spec.preferred_clusters >= 1 && spec.preferred_clusters <= spec.num_clusters);
    assert!(spec.interactions_per_user < spec.num_items);
    let mut rng = stream_rng(seed, Stream::Synthetic);

    let item_clusters: Vec<usize> = (0..spec.num_items)
        .map(|_| rng.gen_range(0..spec.num_clusters))
        .collect();
    let mut cluster_members: Vec<Vec<u32>> = vec![Vec::new(); spec.num_clusters];
    for (i, &c) in item_clusters.iter().enumerate() {
        cluster_members[c].push(i as u32);
    }
    // an emptied cluster gets a member reassigned from the largest one
    for c in 0..spec.num_clusters {
        if cluster_members[c].is_empty() {
            let donor = (0..spec.num_clusters)
                .max_by_key(|&x| cluster_members[x].len())
                .unwrap();
            let item = cluster_members[donor].pop().unwrap();
            cluster_members[c].push(item);
        }
    }
    let mut item_clusters = item_clusters;
    for (c, members) in cluster_members.iter().enumerate() {
        for &i in members {
            item_clusters[i as usize] = c;
        }
    }

    // intra-cluster offsets in a shared latent space
    let q = spec.latent_dim.max(1);
    let offsets = gaussian_matrix(&mut rng, spec.num_items, q, 1.0);

    // features: cluster center + projected offset + noise
    let mut features = Vec::new();
    for modality in &spec.modalities {
        let centers = gaussian_matrix(&mut rng, spec.num_clusters, modality.dim, 1.0);
        let projection = gaussian_matrix(&mut rng, q, modality.dim, 1.0 / (q as f64).sqrt());
        let mut matrix = Mat::zeros(spec.num_items, modality.dim);
        for i in 0..spec.num_items {
            let center = centers.row(item_clusters[i]);
            let delta = offsets.row(i);
            let row = matrix.row_mut(i);
            for k in 0..modality.dim {
                let projected: f64 =
                    (0..q).map(|t| delta[t] * projection.get(t, k)).sum();
                row[k] = center[k]
                    + spec.intra_scale * projected
                    + modality.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        features.push(ModalityFeatures {
            modality_id: modality.id.clone(),
            matrix,
        });
    }

    // interactions: preferred clusters with probability `affinity`, then
    // taste-aligned items within the chosen cluster
    let all_clusters: Vec<usize> = (0..spec.num_clusters).collect();
    let mut pairs = Vec::new();
    let mut item_touched = vec![false; spec.num_items];
    for u in 0..spec.num_users {
        let prefs: Vec<usize> = all_clusters
            .choose_multiple(&mut rng, spec.preferred_clusters)
            .copied()
            .collect();
        let taste: Vec<f64> = (0..q)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut chosen: HashSet<u32> = HashSet::new();
        let mut guard = 0;
        while chosen.len() < spec.interactions_per_user && guard < 10_000 {
            guard += 1;
            let cluster = if rng.gen_bool(spec.affinity) {
                prefs[rng.gen_range(0..prefs.len())]
            } else {
                rng.gen_range(0..spec.num_clusters)
            };
            let members = &cluster_members[cluster];
            let item = if spec.intra_sharpness > 0.0 && members.len() > 1 {
                let logits: Vec<f64> = members
                    .iter()
                    .map(|&i| {
                        let delta = offsets.row(i as usize);
                        spec.intra_sharpness
                            * taste.iter().zip(delta).map(|(t, d)| t * d).sum::<f64>()
                    })
                    .collect();
                members[sample_softmax(&mut rng, &logits)]
            } else {
                members[rng.gen_range(0..members.len())]
            };
            chosen.insert(item);
        }
        let mut chosen: Vec<u32> = chosen.into_iter().collect();
        chosen.sort_unstable();
        for i in chosen {
            item_touched[i as usize] = true;
            pairs.push((u as u32, i));
        }
    }
    // every item needs at least one interaction to be trainable
    for i in 0..spec.num_items {
        if !item_touched[i] {
            let u = rng.gen_range(0..spec.num_users as u32);
            if !pairs.contains(&(u, i as u32)) {
                pairs.push((u, i as u32));
            }
        }
    }

    SynthData {
        dataset: InteractionDataset::from_indexed(spec.num_users, spec.num_items, pairs),
        features,
        item_clusters,
    }
}
