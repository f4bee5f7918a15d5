// Scratch probe for desk-scale tuning (deleted before release).
use std::time::Instant;

use fedsim_core::config::{DatasetConfig, ExperimentConfig, StrategyConfig};
use fedsim_core::data::synth_dataset;
use fedsim_core::fedmgd::run_fedmgd;
use fedsim_core::fl::{run_fedavg, Simulation};
use fedsim_core::metrics::global_accuracy;
use fedsim_core::models::Classifier;
use fedsim_core::params::AdamState;

fn base_cfg(seed: u64, lr: f64) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetConfig::Synth {
            classes: 4,
            per_class: 50,
        },
        resolution: 8,
        num_clients: 2,
        alpha: 0.01,
        seed,
        rounds: 30,
        client_fraction: std::env::var("FEDSIM_FRACTION")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(1.0),
        local_epochs: std::env::var("FEDSIM_E")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(10),
        batch_size: 32,
        lr,
        ..ExperimentConfig::default()
    }
}

fn central_accuracy(seed: u64, lr: f64) -> f64 {
    let ds = synth_dataset(4, 50, 8, seed).unwrap();
    let n = ds.len();
    let split = n * 9 / 10;
    let mut idx: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    let mut rng = fedsim_core::seed::rng_from(seed, &[99]);
    idx.shuffle(&mut rng);
    let (train, test) = idx.split_at(split);
    let clf = Classifier::new(4, 8, seed).unwrap();
    let mut params = clf.params.clone();
    let mut opt = AdamState::new(&params, lr);
    fedsim_core::fl::train_classifier(&clf, &mut params, &mut opt, &ds, train, 40, 32, seed, None)
        .unwrap();
    let model = clf.with_params(params).unwrap();
    global_accuracy(&model, &ds, test).unwrap()
}

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    let lr: f64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.01);

    if mode == "central" || mode == "all" {
        let mut accs = Vec::new();
        for seed in 0..6 {
            accs.push(central_accuracy(seed, lr));
        }
        println!("central accs: {accs:?}");
    }

    if mode == "fedavg" || mode == "all" {
        let mut accs = Vec::new();
        let t0 = Instant::now();
        for seed in 0..10 {
            let mut cfg = base_cfg(seed, lr);
            cfg.strategy = StrategyConfig::FedAvg;
            let rec = run_fedavg(&cfg).unwrap();
            accs.push((rec.last().unwrap().global_acc * 1000.0).round() / 1000.0);
        }
        println!("fedavg@a=0.01 accs: {accs:?} ({:?})", t0.elapsed());
    }

    if mode == "fedmgd" || mode == "all" {
        for seed in 0..10 {
            let t0 = Instant::now();
            let mut cfg = base_cfg(seed, lr);
            cfg.strategy = StrategyConfig::FedMgd;
            cfg.fedmgd.gan_lr = std::env::var("FEDSIM_GANLR").ok().and_then(|v| v.parse().ok());
            if let Some(rb) = std::env::var("FEDSIM_REFINE").ok().and_then(|v| v.parse().ok()) {
                cfg.fedmgd.refine_batch = rb;
            }
            if let Some(t1) = std::env::var("FEDSIM_T1").ok().and_then(|v| v.parse().ok()) {
                cfg.fedmgd.gan_rounds = t1;
            }
            let recs = run_fedmgd(&cfg).unwrap();
            let last = recs.last().unwrap();
            let proxy0 = recs.first().unwrap().quality_proxy.unwrap();
            let proxy_end = recs.iter().rev().find_map(|r| r.quality_proxy).unwrap();
            println!(
                "fedmgd seed {seed}: acc {:.3} proxy {:.3}->{:.3} ({:?})",
                last.global_acc,
                proxy0,
                proxy_end,
                t0.elapsed()
            );
        }
    }

    if mode == "iid" {
        let mut accs = Vec::new();
        for seed in 0..6 {
            let mut cfg = base_cfg(seed, lr);
            cfg.alpha = 1e6;
            cfg.strategy = StrategyConfig::FedAvg;
            let rec = run_fedavg(&cfg).unwrap();
            accs.push((rec.last().unwrap().global_acc * 1000.0).round() / 1000.0);
        }
        println!("fedavg@iid accs: {accs:?}");
    }

    if mode == "skewcheck" {
        // Distribution check: how big are typical client/class splits.
        for seed in 0..3 {
            let cfg = base_cfg(seed, lr);
            let sim = Simulation::prepare(&cfg).unwrap();
            for c in &sim.clients {
                let mut all = c.train_indices.clone();
                all.extend_from_slice(&c.local_test_indices);
                println!(
                    "seed {seed} client {}: hist {:?}",
                    c.id,
                    sim.ds.class_histogram(&all)
                );
            }
        }
    }
}
