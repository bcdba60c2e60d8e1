//! Prepared-artifact layout and the content-hash manifest that keys the
//! preprocessing cache.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stair_core::config::RunConfig;
use stair_core::dataset::{read_indexed_tsv, write_interactions_tsv};
use stair_core::{Error, InteractionDataset, Result};

/// Hashes of the raw inputs plus the preprocessing parameters. When all of
/// them match the current config, prepared artifacts are reused as-is.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub interactions_hash: String,
    pub feature_hashes: BTreeMap<String, String>,
    pub min_degree: usize,
    pub split: [f64; 3],
    pub seed: u64,
    pub num_users: usize,
    pub num_items: usize,
    pub counts: [usize; 3],
    /// Cache key of the similarity graph, when one was built.
    pub similarity_key: Option<String>,
}

pub struct PreparedPaths {
    dir: PathBuf,
}

impl PreparedPaths {
    pub fn new(output_dir: &Path) -> Self {
        PreparedPaths {
            dir: output_dir.join("prepared"),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn split_tsv(&self, split: &str) -> PathBuf {
        self.dir.join(format!("{split}.tsv"))
    }

    pub fn id_map(&self, kind: &str) -> PathBuf {
        self.dir.join(format!("{kind}.tsv"))
    }

    pub fn similarity(&self, key: &str) -> PathBuf {
        self.dir.join(format!("similarity_{key}.spgr"))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex(&hasher.finalize()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Cache key of the similarity graph: feature contents plus neighbor
/// counts. Twelve hex chars keep filenames short.
pub fn similarity_key(
    feature_hashes: &BTreeMap<String, String>,
    knn: &BTreeMap<String, usize>,
) -> String {
    let mut hasher = Sha256::new();
    for (modality, hash) in feature_hashes {
        hasher.update(modality.as_bytes());
        hasher.update(hash.as_bytes());
        let k = knn.get(modality).copied().unwrap_or(0);
        hasher.update((k as u64).to_le_bytes());
    }
    hex(&hasher.finalize())[..12].to_string()
}

/// Hashes of the current raw inputs named by the config.
pub fn input_hashes(config: &RunConfig) -> Result<(String, BTreeMap<String, String>)> {
    let interactions = file_sha256(&config.dataset.interactions)?;
    let mut features = BTreeMap::new();
    for (modality, path) in &config.dataset.features {
        features.insert(modality.clone(), file_sha256(path)?);
    }
    Ok((interactions, features))
}

pub fn write_manifest(paths: &PreparedPaths, manifest: &Manifest) -> Result<()> {
    let path = paths.manifest();
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    file.write_all(json.as_bytes())
        .map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(paths: &PreparedPaths) -> Result<Manifest> {
    let path = paths.manifest();
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        message: e.to_string(),
    })
}

pub fn write_prepared(paths: &PreparedPaths, ds: &InteractionDataset) -> Result<()> {
    fs::create_dir_all(paths.dir()).map_err(|e| Error::io(paths.dir(), e))?;
    write_interactions_tsv(&paths.split_tsv("train"), &ds.train)?;
    write_interactions_tsv(&paths.split_tsv("valid"), &ds.valid)?;
    write_interactions_tsv(&paths.split_tsv("test"), &ds.test)?;
    for (kind, ids) in [("users", &ds.user_ids), ("items", &ds.item_ids)] {
        let path = paths.id_map(kind);
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        for (index, raw) in ids.iter().enumerate() {
            writeln!(file, "{index}\t{raw}").map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

fn read_id_map(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut fields = line.split('\t');
        let (index, raw) = match (fields.next(), fields.next()) {
            (Some(i), Some(r)) => (i, r),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    message: "expected index<TAB>raw_id".into(),
                })
            }
        };
        if index.parse::<usize>() != Ok(out.len()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: "indices must be dense and ordered".into(),
            });
        }
        out.push(raw.to_string());
    }
    Ok(out)
}

/// Loads the prepared dataset, verifying the manifest against the current
/// raw inputs so stale artifacts are refused.
pub fn load_prepared(config: &RunConfig) -> Result<(InteractionDataset, Manifest)> {
    let paths = PreparedPaths::new(&config.output_dir);
    let manifest = read_manifest(&paths).map_err(|e| {
        Error::Config(format!(
            "no prepared artifacts under {} (run `stair prepare` first): {e}",
            paths.dir().display()
        ))
    })?;
    let (interactions_hash, feature_hashes) = input_hashes(config)?;
    if manifest.interactions_hash != interactions_hash
        || manifest.feature_hashes != feature_hashes
        || manifest.min_degree != config.dataset.min_degree
        || manifest.split != config.dataset.split
        || manifest.seed != config.training.seed
    {
        return Err(Error::Config(
            "prepared artifacts are stale for this config; rerun `stair prepare`".into(),
        ));
    }
    let user_ids = read_id_map(&paths.id_map("users"))?;
    let item_ids = read_id_map(&paths.id_map("items"))?;
    let mut ds = InteractionDataset {
        num_users: manifest.num_users,
        num_items: manifest.num_items,
        train: read_indexed_tsv(&paths.split_tsv("train"))?,
        valid: read_indexed_tsv(&paths.split_tsv("valid"))?,
        test: read_indexed_tsv(&paths.split_tsv("test"))?,
        user_adjacency: Vec::new(),
        user_ids,
        item_ids,
    };
    ds.rebuild_adjacency();
    ds.validate()?;
    Ok((ds, manifest))
}
