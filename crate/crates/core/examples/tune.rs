//! Temporary tuning harness for the synthetic comparison experiment.
//! Usage: tune [epochs] [seeds] [clusters] [ints_per_user] [affinity] [t_noise] [v_noise] [gamma] [lr] [wd]

use std::collections::BTreeMap;
use std::time::Instant;

use stair_core::dataset::split_interactions;
use stair_core::init::WhitenStrategy;
use stair_core::synth::{generate, SynthModality, SynthSpec};
use stair_core::training::{train, TrainParams};

struct Knobs {
    epochs: usize,
    seeds: u64,
    clusters: usize,
    ints: usize,
    affinity: f64,
    t_noise: f64,
    v_noise: f64,
    gamma: f64,
    lr: f64,
    wd: f64,
    batch: usize,
}

fn knobs() -> Knobs {
    let a: Vec<String> = std::env::args().collect();
    let get = |i: usize, default: f64| -> f64 {
        a.get(i).map(|s| s.parse().unwrap()).unwrap_or(default)
    };
    Knobs {
        epochs: get(1, 40.0) as usize,
        seeds: get(2, 5.0) as u64,
        clusters: get(3, 50.0) as usize,
        ints: get(4, 8.0) as usize,
        affinity: get(5, 0.9),
        t_noise: get(6, 0.8),
        v_noise: get(7, 1.6),
        gamma: get(8, 0.3),
        lr: get(9, 1e-3),
        wd: get(10, 0.01),
        batch: get(11, 1024.0) as usize,
    }
}

fn spec(k: &Knobs) -> SynthSpec {
    SynthSpec {
        num_users: 2000,
        num_items: 500,
        num_clusters: k.clusters,
        interactions_per_user: k.ints,
        affinity: k.affinity,
        preferred_clusters: 2,
        latent_dim: 8,
        intra_scale: 0.8,
        intra_sharpness: 1.5,
        modalities: vec![
            SynthModality {
                id: "textual".into(),
                dim: 48,
                noise: k.t_noise,
            },
            SynthModality {
                id: "visual".into(),
                dim: 96,
                noise: k.v_noise,
            },
        ],
    }
}

fn base_params(k: &Knobs, seed: u64) -> TrainParams {
    TrainParams {
        d: 64,
        layers: 3,
        gamma: k.gamma,
        beta_scale: 0.9,
        lr: k.lr,
        weight_decay: k.wd,
        batch_size: k.batch,
        epochs: k.epochs,
        seed,
        modality_init: true,
        fsc: true,
        bsc: true,
        whiten_strategy: WhitenStrategy::ConcatThenWhiten,
        knn: BTreeMap::from([("textual".to_string(), 5), ("visual".to_string(), 1)]),
    }
}

fn variant(k: &Knobs, name: &str, seed: u64) -> TrainParams {
    let mut p = base_params(k, seed);
    match name {
        "stair" => {}
        "lightgcn" => {
            p.modality_init = false;
            p.fsc = false;
            p.bsc = false;
        }
        "mf-bpr" => {
            p.modality_init = false;
            p.fsc = false;
            p.bsc = false;
            p.layers = 0;
        }
        "-mi" => p.modality_init = false,
        "-fsc" => p.fsc = false,
        "-bsc" => p.bsc = false,
        _ => panic!("unknown variant"),
    }
    p
}

fn main() {
    let k = knobs();
    let variants = ["stair", "lightgcn", "mf-bpr", "-mi", "-fsc", "-bsc"];
    let mut results: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 1..=k.seeds {
        let data = generate(&spec(&k), seed);
        let ds = split_interactions(&data.dataset, (0.8, 0.1, 0.1), seed).unwrap();
        println!(
            "seed {seed}: {} train / {} valid / {} test",
            ds.train.len(),
            ds.valid.len(),
            ds.test.len()
        );
        for name in variants {
            let t0 = Instant::now();
            let params = variant(&k, name, seed);
            let outcome = train(&params, &ds, &data.features, None, |_| {}).unwrap();
            let h = &outcome.history;
            println!(
                "  {name:>9}: best N@20 {:.4} at epoch {:>3}  loss {:.3}->{:.3}  corr {:.2}->{:.2}  N20 {:.3}->{:.3}  ({:.1}s)",
                outcome.best_valid_ndcg20,
                outcome.best_epoch,
                h[0].loss,
                h[h.len() - 1].loss,
                h[0].correlation,
                h[h.len() - 1].correlation,
                h[0].ndcg20,
                h[h.len() - 1].ndcg20,
                t0.elapsed().as_secs_f64()
            );
            results.entry(name).or_default().push(outcome.best_valid_ndcg20);
        }
    }
    println!("\n== means over {} seeds ({} epochs) ==", k.seeds, k.epochs);
    for (name, values) in &results {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        println!("{name:>9}: mean N@20 {mean:.4}  values {values:.4?}");
    }
    let gap = |a: &str, b: &str| {
        let va = &results[a];
        let vb = &results[b];
        let diffs: Vec<f64> = va.iter().zip(vb).map(|(x, y)| x - y).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let positive = diffs.iter().filter(|&&d| d > 0.0).count();
        println!("gap {a} - {b}: mean {mean:+.4}  positive {positive}/{}  per-seed {diffs:+.4?}", diffs.len());
    };
    gap("stair", "lightgcn");
    gap("lightgcn", "mf-bpr");
    gap("stair", "-mi");
    gap("stair", "-fsc");
    gap("stair", "-bsc");
}
