//! Executes a configured experiment and writes its artifacts: the metrics
//! stream as CSV and JSON-lines plus final model checkpoints. Also renders
//! the partition and score-trace reports the CLI exposes.

use std::path::{Path, PathBuf};

use log::info;

use crate::config::{ExperimentConfig, StrategyConfig};
use crate::error::{Error, Result};
use crate::fedmgd::{run_f2u_full, run_fedmgd_full, FedMgdRun};
use crate::fl::{run_baseline_full, Simulation};
use crate::metrics::{format_sig9, to_csv, to_jsonl, MetricsRecord};
use crate::models::flatten_params;
use crate::params::ParamVector;

/// Paths and records produced by one run.
pub struct RunArtifacts {
    pub records: Vec<MetricsRecord>,
    pub csv_path: PathBuf,
    pub jsonl_path: PathBuf,
    pub checkpoint_paths: Vec<PathBuf>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Runs the configured strategy and writes `metrics.csv`, `metrics.jsonl`,
/// and final checkpoints into `out_dir`.
pub fn execute(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunArtifacts> {
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io {
        path: out_dir.display().to_string(),
        source,
    })?;

    info!(
        "running strategy {} for seed {}",
        cfg.strategy.name(),
        cfg.seed
    );
    let (records, global, generator): (Vec<MetricsRecord>, ParamVector, Option<_>) =
        match cfg.strategy {
            StrategyConfig::FedAvg | StrategyConfig::FedProx { .. } => {
                let (records, global) = run_baseline_full(cfg)?;
                (records, global, None)
            }
            StrategyConfig::FedMgd => {
                let FedMgdRun {
                    records,
                    generator,
                    global,
                    ..
                } = run_fedmgd_full(cfg, false)?;
                (records, global, Some(generator))
            }
            StrategyConfig::F2u => {
                let FedMgdRun {
                    records,
                    generator,
                    global,
                    ..
                } = run_f2u_full(cfg, false)?;
                (records, global, Some(generator))
            }
        };

    let csv_path = out_dir.join("metrics.csv");
    write_file(&csv_path, to_csv(&records).as_bytes())?;
    let jsonl_path = out_dir.join("metrics.jsonl");
    write_file(&jsonl_path, to_jsonl(&records)?.as_bytes())?;

    let mut checkpoint_paths = Vec::new();
    let clf_path = out_dir.join("classifier.fmgd");
    write_file(&clf_path, &flatten_params(&global)?)?;
    checkpoint_paths.push(clf_path);
    if let Some(gen) = generator {
        let gen_path = out_dir.join("generator.fmgd");
        write_file(&gen_path, &flatten_params(&gen.params)?)?;
        checkpoint_paths.push(gen_path);
    }

    Ok(RunArtifacts {
        records,
        csv_path,
        jsonl_path,
        checkpoint_paths,
    })
}

/// Per-client class histograms as CSV (one row per client plus the shared
/// test split), for skew inspection.
pub fn partition_report(cfg: &ExperimentConfig) -> Result<String> {
    let sim = Simulation::prepare(cfg)?;
    let classes = sim.ds.num_classes();
    let mut out = String::from("client");
    for c in 0..classes {
        out.push_str(&format!(",class_{c}"));
    }
    out.push_str(",total\n");
    for (id, shard) in sim.partition.shards.iter().enumerate() {
        let hist = sim.ds.class_histogram(shard);
        out.push_str(&id.to_string());
        for count in &hist {
            out.push_str(&format!(",{count}"));
        }
        out.push_str(&format!(",{}\n", shard.len()));
    }
    let hist = sim.ds.class_histogram(&sim.partition.test_indices);
    out.push_str("test");
    for count in &hist {
        out.push_str(&format!(",{count}"));
    }
    out.push_str(&format!(",{}\n", sim.partition.test_indices.len()));
    Ok(out)
}

/// Per-round Realistic Scores of all clients during the adversarial stage,
/// as CSV.
pub fn score_trace(cfg: &ExperimentConfig) -> Result<String> {
    let run = match cfg.strategy {
        StrategyConfig::F2u => run_f2u_full(cfg, true)?,
        _ => {
            let mut traced = cfg.clone();
            traced.strategy = StrategyConfig::FedMgd;
            run_fedmgd_full(&traced, true)?
        }
    };
    let mut out = String::from("round,client,disc_term,xen_term,value,winner_id\n");
    for report in &run.reports {
        for score in &report.scores {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                report.round,
                score.client_id,
                format_sig9(score.disc_term),
                format_sig9(score.xen_term),
                format_sig9(score.value),
                report.winner
            ));
        }
    }
    Ok(out)
}
