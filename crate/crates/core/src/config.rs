//! Run configuration: a strict JSON document holding dataset paths and all
//! hyperparameters. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::init::WhitenStrategy;
use crate::training::TrainParams;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// TSV file with one `user<TAB>item` pair per line.
    pub interactions: PathBuf,
    /// FMAT feature file per modality id.
    pub features: BTreeMap<String, PathBuf>,
    #[serde(default = "default_min_degree")]
    pub min_degree: usize,
    /// Train/valid/test fractions; must sum to 1.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_min_degree() -> usize {
    5
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_dim")]
    pub d: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    pub gamma: f64,
    /// Neighbor count per modality id for the similarity graph.
    pub knn: BTreeMap<String, usize>,
    #[serde(default = "default_beta_scale")]
    pub beta_scale: f64,
    #[serde(default)]
    pub whiten_strategy: WhitenStrategy,
}

fn default_dim() -> usize {
    64
}

fn default_layers() -> usize {
    3
}

fn default_beta_scale() -> f64 {
    crate::stepwise::DEFAULT_BETA_SCALE
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_batch_size() -> usize {
    1024
}

fn default_epochs() -> usize {
    500
}

fn default_seed() -> u64 {
    1
}

/// Toggles for the model components; all on by default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default = "default_true")]
    pub modality_init: bool,
    #[serde(default = "default_true")]
    pub fsc: bool,
    #[serde(default = "default_true")]
    pub bsc: bool,
}

fn default_true() -> bool {
    true
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            modality_init: true,
            fsc: true,
            bsc: true,
        }
    }
}

/// Collaborative-only baseline presets expressed as degenerate
/// configurations of the same engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    /// Random init, zero-hop convolution, no constrained updates.
    MfBpr,
    /// Random init, uniform layer weights, no constrained updates.
    LightGcn,
}

impl std::str::FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mf-bpr" => Ok(Baseline::MfBpr),
            "lightgcn" => Ok(Baseline::LightGcn),
            other => Err(Error::Config(format!("unknown baseline {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.dataset.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {:?} sum to {sum}, expected 1",
                self.dataset.split
            )));
        }
        if self.dataset.split[0] <= 0.0 {
            return Err(Error::Config("train fraction must be positive".into()));
        }
        if self.model.d == 0 {
            return Err(Error::Config("model.d must be >= 1".into()));
        }
        if self.model.gamma <= 0.0 {
            return Err(Error::Config("model.gamma must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.model.beta_scale) {
            return Err(Error::Config("model.beta_scale must lie in [0, 1)".into()));
        }
        for (modality, &k) in &self.model.knn {
            if k == 0 {
                return Err(Error::Config(format!(
                    "knn count for modality {modality:?} must be >= 1"
                )));
            }
            if !self.dataset.features.contains_key(modality) {
                return Err(Error::Config(format!(
                    "knn names modality {modality:?} with no feature file"
                )));
            }
        }
        if self.ablation.bsc {
            for modality in self.dataset.features.keys() {
                if !self.model.knn.contains_key(modality) {
                    return Err(Error::Config(format!(
                        "modality {modality:?} needs a knn count for constrained updates"
                    )));
                }
            }
        }
        if self.training.lr <= 0.0 {
            return Err(Error::Config("training.lr must be positive".into()));
        }
        if self.training.weight_decay < 0.0 {
            return Err(Error::Config("training.weight_decay must be >= 0".into()));
        }
        if self.training.batch_size == 0 || self.training.epochs == 0 {
            return Err(Error::Config(
                "training.batch_size and training.epochs must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Turns off one component, mirroring the ablation variants.
    pub fn apply_ablation(&mut self, name: &str) -> Result<()> {
        match name {
            "mi" => self.ablation.modality_init = false,
            "fsc" => self.ablation.fsc = false,
            "bsc" => self.ablation.bsc = false,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other:?}; expected mi, fsc or bsc"
                )))
            }
        }
        Ok(())
    }

    /// Rewrites the config into one of the collaborative-only baselines.
    pub fn apply_baseline(&mut self, baseline: Baseline) {
        self.ablation.modality_init = false;
        self.ablation.fsc = false;
        self.ablation.bsc = false;
        if baseline == Baseline::MfBpr {
            self.model.layers = 0;
        }
    }

    /// Hyperparameters passed to the training loop.
    pub fn train_params(&self) -> TrainParams {
        TrainParams {
            d: self.model.d,
            layers: self.model.layers,
            gamma: self.model.gamma,
            beta_scale: self.model.beta_scale,
            lr: self.training.lr,
            weight_decay: self.training.weight_decay,
            batch_size: self.training.batch_size,
            epochs: self.training.epochs,
            seed: self.training.seed,
            modality_init: self.ablation.modality_init,
            fsc: self.ablation.fsc,
            bsc: self.ablation.bsc,
            whiten_strategy: self.model.whiten_strategy,
            knn: self.model.knn.clone(),
        }
    }

    /// SHA-256 of the canonical JSON serialization, hex-encoded.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_encode(&hasher.finalize())
    }
}

pub(crate) fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the dense-index interaction lists and dimensions; two
/// datasets hash equal exactly when preprocessing produced identical
/// splits.
pub fn dataset_hash(ds: &crate::dataset::InteractionDataset) -> String {
    let mut hasher = Sha256::new();
    hasher.update((ds.num_users as u64).to_le_bytes());
    hasher.update((ds.num_items as u64).to_le_bytes());
    for (tag, split) in [(0u8, &ds.train), (1u8, &ds.valid), (2u8, &ds.test)] {
        hasher.update([tag]);
        hasher.update((split.len() as u64).to_le_bytes());
        for &(u, i) in split.iter() {
            hasher.update(u.to_le_bytes());
            hasher.update(i.to_le_bytes());
        }
    }
    hex_encode(&hasher.finalize())
}
