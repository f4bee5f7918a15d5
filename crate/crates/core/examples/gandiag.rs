// Scratch diagnostic for stage-1 dynamics (deleted before release).
use fedsim_core::config::{DatasetConfig, ExperimentConfig, StrategyConfig};
use fedsim_core::fedmgd::run_fedmgd_full;

fn main() {
    let lr: f64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.02);
    let gan_lr: Option<f64> = std::env::args().nth(2).and_then(|s| s.parse().ok());
    let seed: u64 = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let mut cfg = ExperimentConfig {
        dataset: DatasetConfig::Synth {
            classes: 4,
            per_class: 50,
        },
        resolution: 8,
        num_clients: 2,
        alpha: 0.01,
        seed,
        strategy: StrategyConfig::FedMgd,
        rounds: 30,
        client_fraction: 1.0,
        local_epochs: 10,
        batch_size: 32,
        lr,
        ..ExperimentConfig::default()
    };
    cfg.fedmgd.gan_lr = gan_lr;
    let run = run_fedmgd_full(&cfg, false).unwrap();
    let mut winner_counts = std::collections::HashMap::new();
    for rep in &run.reports {
        *winner_counts.entry(rep.winner).or_insert(0usize) += 1;
    }
    println!("winner counts: {winner_counts:?}");
    for rep in run.reports.iter().step_by(20) {
        let sc: Vec<String> = rep
            .scores
            .iter()
            .map(|s| {
                format!(
                    "c{}: d={:.3} x={:.2} v={:.2}",
                    s.client_id, s.disc_term, s.xen_term, s.value
                )
            })
            .collect();
        println!(
            "round {:3} winner {} gen_loss {:7.3} | {}",
            rep.round,
            rep.winner,
            rep.gen_loss,
            sc.join(" | ")
        );
    }
    for rec in run.records.iter().step_by(25) {
        println!(
            "round {:3} stage {:?} acc {:.3} proxy {:?}",
            rec.round,
            rec.stage,
            rec.global_acc,
            rec.quality_proxy.map(|p| (p * 100.0).round() / 100.0)
        );
    }
    let last = run.records.last().unwrap();
    println!("final acc {:.3}", last.global_acc);
}
