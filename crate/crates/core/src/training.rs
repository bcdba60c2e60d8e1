//! BPR training with AdamW and similarity-constrained item updates.
//!
//! A training step runs: forward stepwise convolution over the bipartite
//! graph, BPR loss on sampled triples, gradient pulled back through the
//! (self-adjoint) convolution, AdamW moment update, then a plain decoupled
//! update for users while item descent directions are first transformed by
//! the backward stepwise convolution over the similarity graph.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{InteractionDataset, ModalityFeatures};
use crate::error::{Error, Result};
use crate::eval::{rank_and_score, EvalOptions, SplitChoice};
use crate::graphs::{
    build_bipartite_graph, build_similarity_graph, knn_neighbors, SparsePropagationGraph,
};
use crate::init::{meanpool_user_init, random_init, whiten_init, EmbeddingTable, WhitenStrategy};
use crate::mat::{dot, Mat};
use crate::rng::{stream_rng, Stream};
use crate::stepwise::{
    modality_correlation_diagnostic, stepwise_convolve, Direction, StepwiseSchedule,
};

/// A mini-batch of (user, positive item, negative item) triples. Every
/// negative is a verified non-interaction of the user in the train split.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub triples: Vec<(u32, u32, u32)>,
}

/// Draws `batch_size` triples: positives uniformly from train interactions,
/// negatives resampled uniformly until one falls outside the user's train
/// set. Users interacting with every item are skipped with a warning.
pub fn sample_batch(
    ds: &InteractionDataset,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingBatch> {
    if ds.train.is_empty() {
        return Err(Error::Degenerate("train split is empty".into()));
    }
    let mut triples = Vec::with_capacity(batch_size);
    let mut skip_warned = false;
    while triples.len() < batch_size {
        let (u, i) = ds.train[rng.gen_range(0..ds.train.len())];
        let seen = &ds.user_adjacency[u as usize];
        if seen.len() >= ds.num_items {
            if !skip_warned {
                log::warn!("user {u} interacts with every item; cannot sample a negative");
                skip_warned = true;
            }
            continue;
        }
        let neg = loop {
            let j = rng.gen_range(0..ds.num_items as u32);
            if seen.binary_search(&j).is_err() {
                break j;
            }
        };
        triples.push((u, i, neg));
    }
    Ok(TrainingBatch { triples })
}

/// `ln(1 + exp(z))`, stable for large |z|.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// `1 / (1 + exp(z))`, stable for large |z|.
fn sigmoid_neg(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

/// Mean BPR loss over the batch and its exact gradient with respect to the
/// latent rows touched. `grad` must be zeroed by the caller (or reused
/// across steps and zeroed here); it is accumulated into in place.
pub fn bpr_loss_and_grad(
    latent: &Mat,
    batch: &TrainingBatch,
    num_users: usize,
    grad: &mut Mat,
) -> Result<f64> {
    if grad.rows() != latent.rows() || grad.cols() != latent.cols() {
        return Err(Error::Shape("gradient buffer shape mismatch".into()));
    }
    grad.fill(0.0);
    if batch.triples.is_empty() {
        return Ok(0.0);
    }
    let d = latent.cols();
    let inv_b = 1.0 / batch.triples.len() as f64;
    let mut loss = 0.0;
    for &(u, i, j) in &batch.triples {
        let (u, i, j) = (u as usize, num_users + i as usize, num_users + j as usize);
        let hu = latent.row(u);
        let hi = latent.row(i);
        let hj = latent.row(j);
        let margin = dot(hu, hi) - dot(hu, hj);
        loss += softplus(-margin) * inv_b;
        // d/dmargin of -log sigmoid(margin) = -sigmoid(-margin)
        let g = -sigmoid_neg(margin) * inv_b;
        let row_u = grad.row_mut(u);
        for k in 0..d {
            row_u[k] += g * (hi[k] - hj[k]);
        }
        let row_i = grad.row_mut(i);
        for k in 0..d {
            row_i[k] += g * hu[k];
        }
        let row_j = grad.row_mut(j);
        for k in 0..d {
            row_j[k] -= g * hu[k];
        }
    }
    Ok(loss)
}

/// Pulls a latent-space gradient back to embedding space. The forward
/// convolution is linear with a symmetric graph, so its adjoint is the
/// same stepwise convolution applied to the gradient.
pub fn backprop_through_fsc(
    grad_latent: &Mat,
    graph: &SparsePropagationGraph,
    schedule: &StepwiseSchedule,
) -> Result<Mat> {
    stepwise_convolve(graph, grad_latent, schedule)
}

/// AdamW optimizer state over the two embedding blocks.
#[derive(Debug, Clone)]
pub struct AdamWState {
    pub m_users: Mat,
    pub v_users: Mat,
    pub m_items: Mat,
    pub v_items: Mat,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamWState {
    pub fn new(num_users: usize, num_items: usize, d: usize) -> Self {
        AdamWState {
            m_users: Mat::zeros(num_users, d),
            v_users: Mat::zeros(num_users, d),
            m_items: Mat::zeros(num_items, d),
            v_items: Mat::zeros(num_items, d),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    fn block_direction(&self, m: &mut Mat, v: &mut Mat, grad: &Mat, step: u64) -> Mat {
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        let mut dir = Mat::zeros(grad.rows(), grad.cols());
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let md = m.as_mut_slice();
        let vd = v.as_mut_slice();
        let gd = grad.as_slice();
        let out = dir.as_mut_slice();
        for k in 0..gd.len() {
            md[k] = b1 * md[k] + (1.0 - b1) * gd[k];
            vd[k] = b2 * vd[k] + (1.0 - b2) * gd[k] * gd[k];
            let m_hat = md[k] / bc1;
            let v_hat = vd[k] / bc2;
            out[k] = m_hat / (v_hat.sqrt() + eps);
        }
        dir
    }

    /// Advances the step counter once and returns the bias-corrected
    /// adaptive directions for both blocks. Weight decay is decoupled and
    /// applied at the parameter update, never folded in here.
    pub fn direction(&mut self, grad_users: &Mat, grad_items: &Mat) -> (Mat, Mat) {
        self.step += 1;
        let step = self.step;
        let mut m_users = std::mem::replace(&mut self.m_users, Mat::zeros(0, 0));
        let mut v_users = std::mem::replace(&mut self.v_users, Mat::zeros(0, 0));
        let du = self.block_direction(&mut m_users, &mut v_users, grad_users, step);
        self.m_users = m_users;
        self.v_users = v_users;
        let mut m_items = std::mem::replace(&mut self.m_items, Mat::zeros(0, 0));
        let mut v_items = std::mem::replace(&mut self.v_items, Mat::zeros(0, 0));
        let di = self.block_direction(&mut m_items, &mut v_items, grad_items, step);
        self.m_items = m_items;
        self.v_items = v_items;
        (du, di)
    }
}

/// Decoupled update: `params -= lr * direction + lr * weight_decay * params`.
pub fn apply_update(params: &mut Mat, direction: &Mat, lr: f64, weight_decay: f64) {
    let p = params.as_mut_slice();
    let d = direction.as_slice();
    for k in 0..p.len() {
        p[k] -= lr * d[k] + lr * weight_decay * p[k];
    }
}

/// Transforms the item descent direction through the backward stepwise
/// convolution over the similarity graph, then applies the decoupled
/// update. User embeddings bypass this entirely.
pub fn bsc_update(
    items: &mut Mat,
    direction: &Mat,
    similarity: &SparsePropagationGraph,
    schedule: &StepwiseSchedule,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if schedule.direction() != Direction::Backward {
        return Err(Error::Config(
            "constrained item update requires a backward schedule".into(),
        ));
    }
    let transformed = stepwise_convolve(similarity, direction, schedule)?;
    apply_update(items, &transformed, lr, weight_decay);
    Ok(())
}

/// Hyperparameters of one training run, paths excluded.
#[derive(Debug, Clone)]
pub struct TrainParams {
    pub d: usize,
    pub layers: usize,
    pub gamma: f64,
    pub beta_scale: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub modality_init: bool,
    pub fsc: bool,
    pub bsc: bool,
    pub whiten_strategy: WhitenStrategy,
    /// Neighbors per modality for the similarity graph, keyed by modality id.
    pub knn: BTreeMap<String, usize>,
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be >= 1".into()));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        Ok(())
    }

    /// Schedule used by the forward pass: gamma-controlled when the
    /// stepwise convolution is enabled, uniform otherwise.
    pub fn forward_schedule(&self) -> Result<StepwiseSchedule> {
        if self.fsc {
            StepwiseSchedule::build_scaled(
                self.d,
                self.layers,
                self.gamma,
                self.beta_scale,
                Direction::Forward,
            )
        } else {
            Ok(StepwiseSchedule::uniform(
                self.d,
                self.layers,
                Direction::Forward,
            ))
        }
    }

    /// Complementary schedule applied to item descent directions.
    pub fn backward_schedule(&self) -> Result<StepwiseSchedule> {
        StepwiseSchedule::build_scaled(
            self.d,
            self.layers,
            self.gamma,
            self.beta_scale,
            Direction::Backward,
        )
    }
}

/// Per-epoch training log entry.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub recall10: f64,
    pub recall20: f64,
    pub ndcg10: f64,
    pub ndcg20: f64,
    /// Mean |Pearson| between current item embeddings and the whitened
    /// initialization; NaN when no initialization is available.
    pub correlation: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,loss,recall@10,recall@20,ndcg@10,ndcg@20,mean_abs_pearson";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.loss,
            self.recall10,
            self.recall20,
            self.ndcg10,
            self.ndcg20,
            self.correlation
        )
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the highest validation NDCG@20.
    pub best: EmbeddingTable,
    pub best_optimizer: AdamWState,
    pub best_epoch: usize,
    pub best_valid_ndcg20: f64,
    /// Embeddings after the final epoch.
    pub finals: EmbeddingTable,
    pub history: Vec<EpochRecord>,
    /// Whitened item initialization, when one was computed.
    pub item_init: Option<Mat>,
}

/// Runs the full training loop: initialization, graph construction, then
/// per step forward convolution, BPR loss, AdamW direction, a common user
/// update and the constrained item update. The checkpoint maximizing
/// validation NDCG@20 is retained. `similarity` short-circuits similarity
/// graph construction when a cached graph is available.
pub fn train(
    params: &TrainParams,
    ds: &InteractionDataset,
    features: &[ModalityFeatures],
    similarity: Option<SparsePropagationGraph>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    params.validate()?;
    ds.validate()?;
    if features.is_empty() && (params.modality_init || params.bsc) {
        return Err(Error::Config(
            "modality features required for modality initialization or constrained updates".into(),
        ));
    }

    // initialization
    let item_init = if features.is_empty() {
        None
    } else {
        Some(whiten_init(
            features,
            params.d,
            params.whiten_strategy,
            params.seed,
        )?)
    };
    let mut table = if params.modality_init {
        let items = item_init.clone().expect("features checked above");
        let users = meanpool_user_init(&items, ds)?;
        EmbeddingTable { users, items }
    } else {
        random_init(ds.num_users, ds.num_items, params.d, params.seed)
    };

    // graphs and schedules
    let bipartite = build_bipartite_graph(ds)?;
    let similarity = if params.bsc {
        Some(match similarity {
            Some(g) => {
                if g.dimension() != ds.num_items {
                    return Err(Error::Shape(format!(
                        "similarity graph covers {} items, dataset has {}",
                        g.dimension(),
                        ds.num_items
                    )));
                }
                g
            }
            None => {
                let mut lists = Vec::new();
                for f in features {
                    let k = params.knn.get(&f.modality_id).copied().ok_or_else(|| {
                        Error::Config(format!("no neighbor count for modality {}", f.modality_id))
                    })?;
                    lists.push(knn_neighbors(f, k)?);
                }
                build_similarity_graph(&lists)?
            }
        })
    } else {
        None
    };
    let forward = params.forward_schedule()?;
    let backward = params.backward_schedule()?;

    let mut optimizer = AdamWState::new(ds.num_users, ds.num_items, params.d);
    let mut neg_rng = stream_rng(params.seed, Stream::NegativeSampling);
    let steps_per_epoch = ds.train.len().div_ceil(params.batch_size);

    let eval_options = EvalOptions {
        split: SplitChoice::Valid,
        cutoffs: vec![10, 20],
        mask_train: true,
    };

    let mut best: Option<(EmbeddingTable, AdamWState, usize, f64)> = None;
    let mut history = Vec::with_capacity(params.epochs);
    let n_nodes = ds.num_users + ds.num_items;
    let mut grad_latent = Mat::zeros(n_nodes, params.d);

    for epoch in 1..=params.epochs {
        let mut epoch_loss = 0.0;
        for step in 0..steps_per_epoch {
            let batch = sample_batch(ds, params.batch_size, &mut neg_rng)?;
            let embeddings = table.concatenated();
            let latent = stepwise_convolve(&bipartite, &embeddings, &forward)?;
            let loss = bpr_loss_and_grad(&latent, &batch, ds.num_users, &mut grad_latent)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged at epoch {epoch}, step {step}: |E_U| = {:.3e}, |E_I| = {:.3e}",
                    table.users.frobenius_norm(),
                    table.items.frobenius_norm()
                )));
            }
            epoch_loss += loss;
            let grad_embeddings = backprop_through_fsc(&grad_latent, &bipartite, &forward)?;
            let (grad_users, grad_items) = grad_embeddings.split_rows(ds.num_users);
            let (dir_users, dir_items) = optimizer.direction(&grad_users, &grad_items);
            apply_update(&mut table.users, &dir_users, params.lr, params.weight_decay);
            match &similarity {
                Some(s) => bsc_update(
                    &mut table.items,
                    &dir_items,
                    s,
                    &backward,
                    params.lr,
                    params.weight_decay,
                )?,
                None => apply_update(&mut table.items, &dir_items, params.lr, params.weight_decay),
            }
        }
        epoch_loss /= steps_per_epoch as f64;
        if !table.is_finite() {
            return Err(Error::Numeric(format!(
                "embeddings diverged after epoch {epoch}"
            )));
        }

        // validation metrics and the modality-retention diagnostic
        let latent = stepwise_convolve(&bipartite, &table.concatenated(), &forward)?;
        let report = rank_and_score(&latent, ds, &eval_options)?;
        let correlation = match &item_init {
            Some(init) => modality_correlation_diagnostic(&table.items, init)?,
            None => f64::NAN,
        };
        let record = EpochRecord {
            epoch,
            loss: epoch_loss,
            recall10: report.recall_at(10).unwrap_or(0.0),
            recall20: report.recall_at(20).unwrap_or(0.0),
            ndcg10: report.ndcg_at(10).unwrap_or(0.0),
            ndcg20: report.ndcg_at(20).unwrap_or(0.0),
            correlation,
        };
        let ndcg20 = record.ndcg20;
        on_epoch(&record);
        history.push(record);
        if best.as_ref().map_or(true, |&(_, _, _, b)| ndcg20 > b) {
            best = Some((table.clone(), optimizer.clone(), epoch, ndcg20));
        }
    }

    let (best_table, best_optimizer, best_epoch, best_metric) =
        best.expect("at least one epoch runs");
    Ok(TrainOutcome {
        best: best_table,
        best_optimizer,
        best_epoch,
        best_valid_ndcg20: best_metric,
        finals: table,
        history,
        item_init,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::build_bipartite_graph;
    use crate::rng::{stream_rng, Stream};

    fn toy_dataset() -> InteractionDataset {
        let mut pairs = Vec::new();
        for u in 0..8u32 {
            for i in 0..6u32 {
                if (u + i) % 3 != 0 {
                    pairs.push((u, i));
                }
            }
        }
        InteractionDataset::from_indexed(8, 6, pairs)
    }

    #[test]
    fn negative_sampling_respects_train_set() {
        let ds = toy_dataset();
        let mut rng = stream_rng(1, Stream::NegativeSampling);
        let batch = sample_batch(&ds, 256, &mut rng).unwrap();
        assert_eq!(batch.triples.len(), 256);
        for &(u, i, j) in &batch.triples {
            assert!(ds.user_adjacency[u as usize].binary_search(&i).is_ok());
            assert!(ds.user_adjacency[u as usize].binary_search(&j).is_err());
        }
    }

    #[test]
    fn two_item_negative_is_forced() {
        let ds = InteractionDataset::from_indexed(1, 2, vec![(0, 0)]);
        let mut rng = stream_rng(2, Stream::NegativeSampling);
        let batch = sample_batch(&ds, 32, &mut rng).unwrap();
        for &(_, i, j) in &batch.triples {
            assert_eq!(i, 0);
            assert_eq!(j, 1);
        }
    }

    #[test]
    fn bpr_zero_margin_loss_is_ln_two() {
        // h_u orthogonal to both items -> both scores 0
        let latent = Mat::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ])
        .unwrap();
        let batch = TrainingBatch {
            triples: vec![(0, 0, 1)],
        };
        let mut grad = Mat::zeros(3, 2);
        let loss = bpr_loss_and_grad(&latent, &batch, 1, &mut grad).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bpr_saturates_at_large_margin() {
        let latent = Mat::from_rows(&[
            vec![100.0, 0.0],
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
        ])
        .unwrap();
        let batch = TrainingBatch {
            triples: vec![(0, 0, 1)],
        };
        let mut grad = Mat::zeros(3, 2);
        let loss = bpr_loss_and_grad(&latent, &batch, 1, &mut grad).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
        assert!(loss >= 0.0);
    }

    #[test]
    fn bpr_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = stream_rng(3, Stream::Synthetic);
        let users = 4;
        let items = 5;
        let d = 3;
        let mut latent = Mat::from_rows(
            &(0..users + items)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let batch = TrainingBatch {
            triples: vec![(0, 1, 2), (1, 0, 3), (2, 4, 0), (3, 2, 1), (0, 3, 4)],
        };
        let mut grad = Mat::zeros(users + items, d);
        bpr_loss_and_grad(&latent, &batch, users, &mut grad).unwrap();
        let h = 1e-5;
        let mut probe = Mat::zeros(users + items, d);
        for r in 0..users + items {
            for c in 0..d {
                let orig = latent.get(r, c);
                latent.set(r, c, orig + h);
                let up = bpr_loss_and_grad(&latent, &batch, users, &mut probe).unwrap();
                latent.set(r, c, orig - h);
                let down = bpr_loss_and_grad(&latent, &batch, users, &mut probe).unwrap();
                latent.set(r, c, orig);
                let fd = (up - down) / (2.0 * h);
                let an = grad.get(r, c);
                assert!(
                    (fd - an).abs() <= 1e-6 * fd.abs().max(1.0),
                    "({r},{c}): fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn adamw_first_step_moves_by_about_lr() {
        let mut state = AdamWState::new(1, 1, 1);
        let grad = Mat::from_vec(1, 1, vec![0.5]).unwrap();
        let zero = Mat::zeros(1, 1);
        let (du, _) = state.direction(&grad, &zero);
        // m_hat = g, v_hat = g^2 -> direction = g / (|g| + eps) ~ 1
        assert!((du.get(0, 0) - 1.0).abs() < 1e-6);
        let mut params = Mat::from_vec(1, 1, vec![1.0]).unwrap();
        apply_update(&mut params, &du, 1e-3, 0.0);
        assert!((params.get(0, 0) - (1.0 - 1e-3)).abs() < 1e-8);
    }

    #[test]
    fn adamw_zero_gradient_only_decays() {
        let mut state = AdamWState::new(1, 1, 2);
        let zero_u = Mat::zeros(1, 2);
        let zero_i = Mat::zeros(1, 2);
        let mut params = Mat::from_vec(1, 2, vec![2.0, -4.0]).unwrap();
        for _ in 0..3 {
            let (du, _) = state.direction(&zero_u, &zero_i);
            assert!(du.as_slice().iter().all(|&v| v == 0.0));
            apply_update(&mut params, &du, 0.1, 0.5);
        }
        let decay: f64 = 1.0 - 0.1 * 0.5;
        assert!((params.get(0, 0) - 2.0 * decay.powi(3)).abs() < 1e-12);
        assert!((params.get(0, 1) + 4.0 * decay.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn adamw_matches_reference_trace() {
        // hand-rolled scalar Adam with bias correction
        let mut state = AdamWState::new(1, 1, 1);
        let gradients = [0.5, -0.2, 0.8, 0.1, -0.9, 0.3, 0.0, 0.6, -0.4, 0.7];
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let zero = Mat::zeros(1, 1);
        for (t, &g) in gradients.iter().enumerate() {
            let grad = Mat::from_vec(1, 1, vec![g]).unwrap();
            let (du, _) = state.direction(&grad, &zero);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t as i32 + 1));
            let v_hat = v / (1.0 - b2.powi(t as i32 + 1));
            let expected = m_hat / (v_hat.sqrt() + eps);
            assert!(
                (du.get(0, 0) - expected).abs() <= 1e-10,
                "step {t}: {} vs {expected}",
                du.get(0, 0)
            );
        }
    }

    #[test]
    fn backprop_identity_graph_is_identity() {
        let g = SparsePropagationGraph::identity(4);
        let schedule = StepwiseSchedule::build(3, 2, 0.5, Direction::Forward).unwrap();
        let grad = Mat::from_rows(&[
            vec![1.0, 2.0, 3.0],
            vec![-1.0, 0.0, 1.0],
            vec![0.5, 0.5, 0.5],
            vec![0.0, -2.0, 4.0],
        ])
        .unwrap();
        let out = backprop_through_fsc(&grad, &g, &schedule).unwrap();
        assert_eq!(out.as_slice(), grad.as_slice());
    }

    #[test]
    fn backprop_zero_hop_ignores_graph() {
        let ds = toy_dataset();
        let g = build_bipartite_graph(&ds).unwrap();
        let schedule = StepwiseSchedule::build(3, 0, 0.5, Direction::Forward).unwrap();
        let grad = Mat::from_rows(
            &(0..g.dimension())
                .map(|i| vec![i as f64, -(i as f64), 0.5])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let out = backprop_through_fsc(&grad, &g, &schedule).unwrap();
        assert_eq!(out.as_slice(), grad.as_slice());
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = stream_rng(7, Stream::Synthetic);
        let ds = toy_dataset();
        let graph = build_bipartite_graph(&ds).unwrap();
        let n = graph.dimension();
        let d = 4;
        let schedule = StepwiseSchedule::build(d, 3, 0.4, Direction::Forward).unwrap();
        let mut embeddings = Mat::from_rows(
            &(0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let mut neg_rng = stream_rng(8, Stream::NegativeSampling);
        let batch = sample_batch(&ds, 20, &mut neg_rng).unwrap();

        let latent = stepwise_convolve(&graph, &embeddings, &schedule).unwrap();
        let mut grad_latent = Mat::zeros(n, d);
        bpr_loss_and_grad(&latent, &batch, ds.num_users, &mut grad_latent).unwrap();
        let grad = backprop_through_fsc(&grad_latent, &graph, &schedule).unwrap();

        let mut probe = Mat::zeros(n, d);
        let h = 1e-4;
        for r in 0..n {
            for c in 0..d {
                let orig = embeddings.get(r, c);
                embeddings.set(r, c, orig + h);
                let lat = stepwise_convolve(&graph, &embeddings, &schedule).unwrap();
                let up = bpr_loss_and_grad(&lat, &batch, ds.num_users, &mut probe).unwrap();
                embeddings.set(r, c, orig - h);
                let lat = stepwise_convolve(&graph, &embeddings, &schedule).unwrap();
                let down = bpr_loss_and_grad(&lat, &batch, ds.num_users, &mut probe).unwrap();
                embeddings.set(r, c, orig);
                let fd = (up - down) / (2.0 * h);
                let an = grad.get(r, c);
                assert!(
                    (fd - an).abs() <= 1e-5 * fd.abs().max(1.0),
                    "({r},{c}): fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn bsc_identity_similarity_is_plain_update() {
        let schedule = StepwiseSchedule::build(3, 3, 0.5, Direction::Backward).unwrap();
        let s = SparsePropagationGraph::identity(2);
        let direction = Mat::from_rows(&[vec![0.1, -0.2, 0.3], vec![0.4, 0.0, -0.6]]).unwrap();
        let mut via_bsc = Mat::from_rows(&[vec![1.0, 1.0, 1.0], vec![2.0, 2.0, 2.0]]).unwrap();
        let mut plain = via_bsc.clone();
        bsc_update(&mut via_bsc, &direction, &s, &schedule, 0.01, 0.1).unwrap();
        apply_update(&mut plain, &direction, 0.01, 0.1);
        assert_eq!(via_bsc.as_slice(), plain.as_slice(), "must be bitwise equal");
    }

    #[test]
    fn bsc_zero_hop_is_plain_update() {
        let schedule = StepwiseSchedule::build(3, 0, 0.5, Direction::Backward).unwrap();
        let s = SparsePropagationGraph::from_edges(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let direction = Mat::from_rows(&[vec![0.1, -0.2, 0.3], vec![0.4, 0.0, -0.6]]).unwrap();
        let mut via_bsc = Mat::from_rows(&[vec![1.0, 1.0, 1.0], vec![2.0, 2.0, 2.0]]).unwrap();
        let mut plain = via_bsc.clone();
        bsc_update(&mut via_bsc, &direction, &s, &schedule, 0.05, 0.0).unwrap();
        apply_update(&mut plain, &direction, 0.05, 0.0);
        assert_eq!(via_bsc.as_slice(), plain.as_slice());
    }

    #[test]
    fn bsc_two_item_closed_form() {
        // two items that are mutual sole neighbors: S normalized is the
        // swap matrix, whose powers alternate between I and the swap
        let beta = 0.3;
        let layers = 3;
        let d = 2;
        let schedule =
            StepwiseSchedule::constant_beta(d, layers, beta, Direction::Backward).unwrap();
        let s = SparsePropagationGraph::from_edges(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let direction = Mat::from_rows(&[vec![0.2, -0.1], vec![-0.4, 0.5]]).unwrap();
        let mut items = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let (lr, wd) = (0.01, 0.2);

        // closed form: T = (a0 + a2) * D + (a1 + a3) * swap(D)
        let a: Vec<f64> = (0..=layers)
            .map(|l| (1.0 - beta) / (1.0 - beta.powi(layers as i32 + 1)) * beta.powi(l as i32))
            .collect();
        let even = a[0] + a[2];
        let odd = a[1] + a[3];
        let mut expected = items.clone();
        for col in 0..d {
            let t0 = even * direction.get(0, col) + odd * direction.get(1, col);
            let t1 = even * direction.get(1, col) + odd * direction.get(0, col);
            let e0 = expected.get(0, col);
            let e1 = expected.get(1, col);
            expected.set(0, col, e0 - lr * t0 - lr * wd * e0);
            expected.set(1, col, e1 - lr * t1 - lr * wd * e1);
        }
        bsc_update(&mut items, &direction, &s, &schedule, lr, wd).unwrap();
        assert!(items.max_abs_diff(&expected) <= 1e-12);
    }

    fn smoke_params(seed: u64) -> TrainParams {
        TrainParams {
            d: 8,
            layers: 2,
            gamma: 0.5,
            beta_scale: 0.9,
            lr: 1e-2,
            weight_decay: 0.01,
            batch_size: 64,
            epochs: 4,
            seed,
            modality_init: true,
            fsc: true,
            bsc: true,
            whiten_strategy: WhitenStrategy::ConcatThenWhiten,
            knn: BTreeMap::from([("m".to_string(), 2usize)]),
        }
    }

    fn smoke_data() -> (InteractionDataset, Vec<ModalityFeatures>) {
        let spec = crate::synth::SynthSpec {
            num_users: 50,
            num_items: 30,
            num_clusters: 5,
            interactions_per_user: 8,
            affinity: 0.9,
            preferred_clusters: 2,
            latent_dim: 4,
            intra_scale: 0.5,
            intra_sharpness: 1.0,
            modalities: vec![
                crate::synth::SynthModality {
                    id: "m".into(),
                    dim: 12,
                    noise: 0.3,
                },
            ],
        };
        let data = crate::synth::generate(&spec, 99);
        let ds = crate::dataset::split_interactions(&data.dataset, (0.8, 0.1, 0.1), 5).unwrap();
        (ds, data.features)
    }

    #[test]
    fn training_reduces_loss_and_beats_random_ranking() {
        let (ds, features) = smoke_data();
        let mut params = smoke_params(1);
        params.epochs = 12;
        let outcome = train(&params, &ds, &features, None, |_| {}).unwrap();
        let first = outcome.history.first().unwrap().loss;
        let last = outcome.history.last().unwrap().loss;
        assert!(last < first, "loss should fall: {first} -> {last}");
        // random ranking recall@10 over 30 items is about 10/30
        let best_recall10 = outcome
            .history
            .iter()
            .map(|r| r.recall10)
            .fold(0.0, f64::max);
        assert!(
            best_recall10 > 10.0 / 30.0,
            "recall@10 {best_recall10} should beat the random baseline"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, features) = smoke_data();
        let params = smoke_params(3);
        let a = train(&params, &ds, &features, None, |_| {}).unwrap();
        let b = train(&params, &ds, &features, None, |_| {}).unwrap();
        for (ra, rb) in a.history.iter().zip(&b.history) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
            assert_eq!(ra.ndcg20.to_bits(), rb.ndcg20.to_bits());
        }
        assert_eq!(a.best.items.as_slice(), b.best.items.as_slice());
    }

    #[test]
    fn bsc_with_identity_similarity_matches_disabled_bsc_bitwise() {
        let (ds, features) = smoke_data();
        let mut with_identity = smoke_params(5);
        with_identity.epochs = 3;
        let mut without = with_identity.clone();
        without.bsc = false;
        let identity = SparsePropagationGraph::identity(ds.num_items);
        let a = train(&with_identity, &ds, &features, Some(identity), |_| {}).unwrap();
        let b = train(&without, &ds, &features, None, |_| {}).unwrap();
        assert_eq!(a.finals.users.as_slice(), b.finals.users.as_slice());
        assert_eq!(a.finals.items.as_slice(), b.finals.items.as_slice());
    }
}
