//! `fedsim`: run federated label-skew experiments from a config file.
//!
//! Subcommands:
//!   run               execute the configured strategy, write metrics + checkpoints
//!   partition-report  per-client class histograms as CSV
//!   score-trace       per-round Realistic Scores of all clients as CSV
//!   check-grad        run the finite-difference gradient suite
//!
//! Logging is controlled by the FEDSIM_LOG env var (error|info|debug).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::error;

use fedsim_core::config::{parse_config, ExperimentConfig};
use fedsim_core::gradcheck;
use fedsim_core::runner;

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated label-skew simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Experiment config file (key = value lines); omit for all defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out.dir` from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for per-round client work (1 = serial).
    #[arg(long)]
    threads: Option<usize>,
    /// Experiment seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the configured strategy and write metrics and checkpoints.
    Run(ConfigArgs),
    /// Emit per-client class histograms for the configured partition.
    PartitionReport(ConfigArgs),
    /// Emit per-round Realistic Scores of all clients (adversarial stage).
    ScoreTrace(ConfigArgs),
    /// Run the finite-difference gradient suite and report each check.
    CheckGrad,
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let text = match &args.config {
        Some(path) => std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => String::new(),
    };
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = args.threads {
        if threads == 0 {
            anyhow::bail!("--threads must be >= 1");
        }
        cfg.threads = threads;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn cmd_run(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let dir = out_dir(&cfg);
    let artifacts = runner::execute(&cfg, &dir)?;
    println!(
        "strategy {} finished: {} records, final accuracy {:.4}",
        cfg.strategy.name(),
        artifacts.records.len(),
        artifacts.records.last().map(|r| r.global_acc).unwrap_or(0.0)
    );
    println!("metrics: {}", artifacts.csv_path.display());
    println!("metrics: {}", artifacts.jsonl_path.display());
    for ckpt in &artifacts.checkpoint_paths {
        println!("checkpoint: {}", ckpt.display());
    }
    Ok(())
}

fn write_report(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn cmd_partition_report(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let report = runner::partition_report(&cfg)?;
    let path = write_report(&out_dir(&cfg), "partition.csv", &report)?;
    print!("{report}");
    println!("written: {}", path.display());
    Ok(())
}

fn cmd_score_trace(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let trace = runner::score_trace(&cfg)?;
    let path = write_report(&out_dir(&cfg), "score_trace.csv", &trace)?;
    println!("written: {} ({} rows)", path.display(), trace.lines().count() - 1);
    Ok(())
}

fn cmd_check_grad() -> Result<()> {
    let reports = gradcheck::full_suite()?;
    let mut failed = 0;
    for r in &reports {
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        println!(
            "{verdict} {} (max scaled err {:.3e}, {} params, tol {:.0e})",
            r.name,
            r.max_scaled_err,
            r.params_checked,
            gradcheck::FD_TOLERANCE
        );
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        anyhow::bail!("{failed} gradient checks failed");
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDSIM_LOG", "error")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::PartitionReport(args) => cmd_partition_report(args),
        Command::ScoreTrace(args) => cmd_score_trace(args),
        Command::CheckGrad => cmd_check_grad(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            error!("{err:#}");
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
