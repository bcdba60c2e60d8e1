//! Command-line entry point wiring the engine into reproducible workflows:
//! `prepare`, `train`, `evaluate` and `analyze-uncertainty`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 input or validation failure.

mod artifacts;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stair_core::checkpoint::Checkpoint;
use stair_core::config::{dataset_hash, Baseline, RunConfig};
use stair_core::dataset::{load_features, load_interactions, split_interactions, write_fmat};
use stair_core::eval::{behavior_uncertainty, rank_and_score, EvalOptions, SplitChoice};
use stair_core::graphs::{build_bipartite_graph, build_similarity_graph, knn_neighbors};
use stair_core::stepwise::stepwise_convolve;
use stair_core::synth::noise_features;
use stair_core::training::{train, EpochRecord};
use stair_core::{Error, ModalityFeatures, Result, SparsePropagationGraph};

use artifacts::{
    input_hashes, load_prepared, read_manifest, similarity_key, write_manifest, write_prepared,
    Manifest, PreparedPaths,
};

#[derive(Parser)]
#[command(name = "stair", version, about = "Multimodal graph-convolutional recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ToggleArgs {
    /// Disable a component: mi, fsc or bsc. Repeatable.
    #[arg(long = "ablate", value_name = "COMPONENT")]
    ablate: Vec<String>,
    /// Run a collaborative-only baseline: mf-bpr or lightgcn.
    #[arg(long)]
    baseline: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Preprocess raw inputs: k-core filter, split, validate features,
    /// and cache the similarity graph. Content-hash keyed; reruns with
    /// unchanged inputs are no-ops.
    Prepare {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train a model on prepared artifacts and write the best checkpoint.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        toggles: ToggleArgs,
    },
    /// Evaluate a checkpoint on a split.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        toggles: ToggleArgs,
        /// Checkpoint path; defaults to <output_dir>/checkpoint.stcp.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split to evaluate: train, valid or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Disable train-item masking (sanity runs only).
        #[arg(long)]
        no_mask: bool,
        /// Emit the report as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Cluster item features and report per-user behavior entropy.
    AnalyzeUncertainty {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated sources: any modality id, `random`, `pretrained`.
        #[arg(long, value_delimiter = ',')]
        sources: Option<Vec<String>>,
        /// Comma-separated cluster counts.
        #[arg(long, value_delimiter = ',', default_values_t = vec![10usize, 20])]
        clusters: Vec<usize>,
        /// Checkpoint supplying pretrained embeddings.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(common: &CommonArgs, toggles: Option<&ToggleArgs>) -> Result<RunConfig> {
    let mut config = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.training.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    if let Some(toggles) = toggles {
        if let Some(name) = &toggles.baseline {
            config.apply_baseline(name.parse::<Baseline>()?);
        }
        for name in &toggles.ablate {
            config.apply_ablation(name)?;
        }
    }
    config.validate()?;
    Ok(config)
}

fn group_digits(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn load_all_features(config: &RunConfig, num_items: usize) -> Result<Vec<ModalityFeatures>> {
    let mut features = Vec::new();
    for (modality, path) in &config.dataset.features {
        features.push(load_features(path, modality, num_items)?);
    }
    Ok(features)
}

fn cmd_prepare(common: CommonArgs) -> Result<()> {
    let config = load_config(&common, None)?;
    fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
    let paths = PreparedPaths::new(&config.output_dir);
    let (interactions_hash, feature_hashes) = input_hashes(&config)?;
    let wanted_key = if config.model.knn.is_empty() {
        None
    } else {
        Some(similarity_key(&feature_hashes, &config.model.knn))
    };

    if let Ok(existing) = read_manifest(&paths) {
        let fresh = existing.interactions_hash == interactions_hash
            && existing.feature_hashes == feature_hashes
            && existing.min_degree == config.dataset.min_degree
            && existing.split == config.dataset.split
            && existing.seed == config.training.seed
            && existing.similarity_key == wanted_key
            && existing
                .similarity_key
                .as_ref()
                .map_or(true, |key| paths.similarity(key).exists());
        if fresh {
            println!(
                "cache hit: prepared artifacts in {} are up to date",
                paths.dir().display()
            );
            print_stats(&existing);
            return Ok(());
        }
    }

    let loaded = load_interactions(&config.dataset.interactions, config.dataset.min_degree)?;
    let split = config.dataset.split;
    let ds = split_interactions(&loaded, (split[0], split[1], split[2]), config.training.seed)?;
    ds.validate()?;
    let features = load_all_features(&config, ds.num_items)?;
    write_prepared(&paths, &ds)?;

    let similarity_key_built = match &wanted_key {
        Some(key) => {
            let mut lists = Vec::new();
            for f in &features {
                let k = config.model.knn.get(&f.modality_id).copied().ok_or_else(|| {
                    Error::Config(format!("no neighbor count for modality {}", f.modality_id))
                })?;
                log::info!("building {k}-NN lists for modality {}", f.modality_id);
                lists.push(knn_neighbors(f, k)?);
            }
            let graph = build_similarity_graph(&lists)?;
            graph.write_spgr(&paths.similarity(key))?;
            wanted_key.clone()
        }
        None => None,
    };

    let manifest = Manifest {
        interactions_hash,
        feature_hashes,
        min_degree: config.dataset.min_degree,
        split,
        seed: config.training.seed,
        num_users: ds.num_users,
        num_items: ds.num_items,
        counts: [ds.train.len(), ds.valid.len(), ds.test.len()],
        similarity_key: similarity_key_built,
    };
    write_manifest(&paths, &manifest)?;
    print_stats(&manifest);
    Ok(())
}

fn print_stats(manifest: &Manifest) {
    let interactions: usize = manifest.counts.iter().sum();
    let sparsity =
        1.0 - interactions as f64 / (manifest.num_users * manifest.num_items) as f64;
    println!(
        "{} users, {} items, {} interactions, {:.2}% sparsity",
        group_digits(manifest.num_users),
        group_digits(manifest.num_items),
        group_digits(interactions),
        100.0 * sparsity
    );
    println!(
        "split: {} train / {} valid / {} test",
        group_digits(manifest.counts[0]),
        group_digits(manifest.counts[1]),
        group_digits(manifest.counts[2])
    );
}

fn load_similarity_cache(
    paths: &PreparedPaths,
    manifest: &Manifest,
) -> Option<SparsePropagationGraph> {
    let key = manifest.similarity_key.as_ref()?;
    let path = paths.similarity(key);
    match SparsePropagationGraph::read_spgr(&path) {
        Ok(graph) => Some(graph),
        Err(e) => {
            log::warn!("similarity cache unreadable ({e}); rebuilding from features");
            None
        }
    }
}

fn cmd_train(common: CommonArgs, toggles: ToggleArgs) -> Result<()> {
    let config = load_config(&common, Some(&toggles))?;
    let (ds, manifest) = load_prepared(&config)?;
    let features = load_all_features(&config, ds.num_items)?;
    let paths = PreparedPaths::new(&config.output_dir);
    let similarity = if config.ablation.bsc {
        load_similarity_cache(&paths, &manifest)
    } else {
        None
    };

    let params = config.train_params();
    let forward = params.forward_schedule()?;
    let backward = params.backward_schedule()?;
    for (name, schedule) in [("forward", &forward), ("backward", &backward)] {
        let path = config.output_dir.join(format!("schedule_{name}.csv"));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        schedule
            .write_alpha_csv(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(&path, e))?;
    }

    let metrics_path = config.output_dir.join("metrics.csv");
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    writeln!(metrics, "{}", EpochRecord::CSV_HEADER).map_err(|e| Error::io(&metrics_path, e))?;
    let epochs = params.epochs;
    let outcome = train(&params, &ds, &features, similarity, |record| {
        let _ = writeln!(metrics, "{}", record.csv_line());
        let _ = metrics.flush();
        println!(
            "epoch {:>4}/{epochs}  loss {:.4}  R@20 {:.4}  N@20 {:.4}",
            record.epoch, record.loss, record.recall20, record.ndcg20
        );
    })?;

    let checkpoint = Checkpoint {
        config_hash: config.content_hash(),
        dataset_hash: dataset_hash(&ds),
        best_epoch: outcome.best_epoch as u64,
        best_valid_ndcg20: outcome.best_valid_ndcg20,
        embeddings: outcome.best.clone(),
        optimizer: outcome.best_optimizer.clone(),
    };
    let ckpt_path = config.output_dir.join("checkpoint.stcp");
    checkpoint.save(&ckpt_path)?;
    write_fmat(
        &config.output_dir.join("embeddings_user.fmat"),
        &outcome.best.users,
    )?;
    write_fmat(
        &config.output_dir.join("embeddings_item.fmat"),
        &outcome.best.items,
    )?;
    if let Some(init) = &outcome.item_init {
        write_fmat(&config.output_dir.join("item_init.fmat"), init)?;
    }
    let summary = serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "best_valid_ndcg20": outcome.best_valid_ndcg20,
        "epochs": params.epochs,
        "seed": params.seed,
        "config_hash": checkpoint.config_hash,
        "dataset_hash": checkpoint.dataset_hash,
    });
    let summary_path = config.output_dir.join("summary.json");
    fs::write(&summary_path, serde_json::to_string_pretty(&summary).unwrap())
        .map_err(|e| Error::io(&summary_path, e))?;
    println!(
        "best epoch {} with validation NDCG@20 {:.4}; checkpoint at {}",
        outcome.best_epoch,
        outcome.best_valid_ndcg20,
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_evaluate(
    common: CommonArgs,
    toggles: ToggleArgs,
    checkpoint: Option<PathBuf>,
    split: String,
    no_mask: bool,
    json: bool,
) -> Result<()> {
    let config = load_config(&common, Some(&toggles))?;
    let (ds, _manifest) = load_prepared(&config)?;
    let ckpt_path = checkpoint.unwrap_or_else(|| config.output_dir.join("checkpoint.stcp"));
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let current_hash = dataset_hash(&ds);
    if ckpt.dataset_hash != current_hash {
        return Err(Error::HashMismatch(format!(
            "checkpoint was trained on dataset {} but the prepared dataset hashes to {}; \
             refusing to evaluate across datasets",
            &ckpt.dataset_hash[..12.min(ckpt.dataset_hash.len())],
            &current_hash[..12]
        )));
    }
    if ckpt.config_hash != config.content_hash() {
        log::warn!("checkpoint was trained under a different config; evaluating anyway");
    }
    let params = config.train_params();
    if ckpt.embeddings.dim() != params.d {
        return Err(Error::Shape(format!(
            "checkpoint dimension {} vs configured {}",
            ckpt.embeddings.dim(),
            params.d
        )));
    }
    let bipartite = build_bipartite_graph(&ds)?;
    let forward = params.forward_schedule()?;
    let latent = stepwise_convolve(&bipartite, &ckpt.embeddings.concatenated(), &forward)?;
    let options = EvalOptions {
        split: split.parse::<SplitChoice>()?,
        cutoffs: vec![10, 20],
        mask_train: !no_mask,
    };
    let report = rank_and_score(&latent, &ds, &options)?;
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Config(format!("report serialization: {e}")))?
        );
    } else {
        println!("{report}");
    }
    Ok(())
}

fn cmd_analyze_uncertainty(
    common: CommonArgs,
    sources: Option<Vec<String>>,
    clusters: Vec<usize>,
    checkpoint: Option<PathBuf>,
) -> Result<()> {
    let config = load_config(&common, None)?;
    let (ds, _manifest) = load_prepared(&config)?;
    let sources = sources.unwrap_or_else(|| {
        let mut all: Vec<String> = config.dataset.features.keys().cloned().collect();
        all.push("random".into());
        if checkpoint.is_some() {
            all.push("pretrained".into());
        }
        all
    });
    if sources.is_empty() {
        log::warn!("no sources requested; nothing to analyze");
        return Ok(());
    }
    let out_dir = config.output_dir.join("uncertainty");
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut rows: Vec<(String, usize, f64)> = Vec::new();
    let mut feature_cache: BTreeMap<String, ModalityFeatures> = BTreeMap::new();

    for source in &sources {
        let matrix = match source.as_str() {
            "random" => Some(noise_features(ds.num_items, 64, config.training.seed).matrix),
            "pretrained" => match &checkpoint {
                Some(path) => match Checkpoint::load(path) {
                    Ok(ckpt) if ckpt.embeddings.items.rows() == ds.num_items => {
                        Some(ckpt.embeddings.items)
                    }
                    Ok(_) => {
                        log::warn!("checkpoint item count mismatch; skipping pretrained source");
                        None
                    }
                    Err(e) => {
                        log::warn!("cannot load checkpoint ({e}); skipping pretrained source");
                        None
                    }
                },
                None => {
                    log::warn!("no --checkpoint given; skipping pretrained source");
                    None
                }
            },
            modality => match config.dataset.features.get(modality) {
                Some(path) => {
                    if !feature_cache.contains_key(modality) {
                        match load_features(path, modality, ds.num_items) {
                            Ok(f) => {
                                feature_cache.insert(modality.to_string(), f);
                            }
                            Err(e) => {
                                log::warn!("cannot load modality {modality} ({e}); skipping");
                            }
                        }
                    }
                    feature_cache.get(modality).map(|f| f.matrix.clone())
                }
                None => {
                    log::warn!("unknown source {modality:?}; skipping");
                    None
                }
            },
        };
        let Some(matrix) = matrix else {
            rows.push((source.clone(), 0, f64::NAN));
            continue;
        };
        for &c in &clusters {
            let report = behavior_uncertainty(&matrix, &ds, c, config.training.seed, source)?;
            println!(
                "{source:>12} C={c:<3} mean entropy {:.4} nats",
                report.mean_entropy
            );
            let json_path = out_dir.join(format!("uncertainty_{source}_{c}.json"));
            fs::write(
                &json_path,
                serde_json::to_string(&report)
                    .map_err(|e| Error::Config(format!("report serialization: {e}")))?,
            )
            .map_err(|e| Error::io(&json_path, e))?;
            rows.push((source.clone(), c, report.mean_entropy));
        }
    }

    let csv_path = out_dir.join("uncertainty.csv");
    let mut csv = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    writeln!(csv, "source,clusters,mean_entropy").map_err(|e| Error::io(&csv_path, e))?;
    for (source, c, h) in &rows {
        if *c == 0 {
            writeln!(csv, "{source},,skipped").map_err(|e| Error::io(&csv_path, e))?;
        } else {
            writeln!(csv, "{source},{c},{h:.6}").map_err(|e| Error::io(&csv_path, e))?;
        }
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare { common } => cmd_prepare(common),
        Command::Train { common, toggles } => cmd_train(common, toggles),
        Command::Evaluate {
            common,
            toggles,
            checkpoint,
            split,
            no_mask,
            json,
        } => cmd_evaluate(common, toggles, checkpoint, split, no_mask, json),
        Command::AnalyzeUncertainty {
            common,
            sources,
            clusters,
            checkpoint,
        } => cmd_analyze_uncertainty(common, sources, clusters, checkpoint),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
