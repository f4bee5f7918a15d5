// Scratch: trace the enhancement loop (deleted before release).
use fedsim_core::config::{DatasetConfig, ExperimentConfig, StrategyConfig};
use fedsim_core::fedmgd::run_fedmgd_full;
use fedsim_core::fl::run_fedavg;

fn main() {
    let mut cfg = ExperimentConfig {
        dataset: DatasetConfig::Synth {
            classes: 4,
            per_class: 50,
        },
        resolution: 8,
        num_clients: 2,
        alpha: 0.01,
        seed: 0,
        strategy: StrategyConfig::FedMgd,
        rounds: 30,
        client_fraction: 1.0,
        local_epochs: 1,
        batch_size: 32,
        lr: 0.0005,
        ..ExperimentConfig::default()
    };
    cfg.fedmgd.gan_rounds = 0;
    cfg.fedmgd.enhance_rounds = 30;
    cfg.fedmgd.refine_batch = 64;

    let run = run_fedmgd_full(&cfg, false).unwrap();
    for rec in &run.records {
        println!(
            "round {:3} {:?} acc {:.3}",
            rec.round, rec.stage, rec.global_acc
        );
    }

    cfg.strategy = StrategyConfig::FedAvg;
    let fa = run_fedavg(&cfg).unwrap();
    println!(
        "fedavg rounds 0/10/30: {:.3} {:.3} {:.3}",
        fa[0].global_acc, fa[10].global_acc, fa[30].global_acc
    );
}
