//! Declarative experiment configuration.
//!
//! The config grammar is a flat key-value document: one `key = value` per
//! line, `#` starts a comment, dotted keys express nesting. Unknown keys are
//! rejected and every parse/validation error names the offending key.
//!
//! ```text
//! # two clients, heavy skew
//! clients = 2
//! alpha = 0.01
//! strategy = fedmgd
//! fedmgd.gan_rounds = 200
//! ```

use std::path::PathBuf;

use crate::error::{Error, Result};

/// Data source for a run.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetConfig {
    Synth { classes: usize, per_class: usize },
    Idx { images: PathBuf, labels: PathBuf },
}

/// Which training strategy a run executes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StrategyConfig {
    FedAvg,
    FedProx { mu: f64 },
    F2u,
    FedMgd,
}

impl StrategyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyConfig::FedAvg => "fedavg",
            StrategyConfig::FedProx { .. } => "fedprox",
            StrategyConfig::F2u => "f2u",
            StrategyConfig::FedMgd => "fedmgd",
        }
    }
}

/// Two-stage protocol or the fused one-stage ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageMode {
    TwoStage,
    OneStage,
}

/// How the generator's preset labels are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSamplingMode {
    ServerUniform,
    ClientProportional,
}

/// Knobs for the generative protocol (also used by the F2U baseline).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedMgdConfig {
    pub mode: StageMode,
    pub gan_rounds: usize,
    pub enhance_rounds: usize,
    pub gan_batch: usize,
    pub refine_batch: usize,
    pub label_sampling: LabelSamplingMode,
    /// Learning rate for the adversarial stage (generator, discriminators,
    /// and stage-1 classifier passes). `None` inherits the global `lr`.
    pub gan_lr: Option<f64>,
}

impl Default for FedMgdConfig {
    fn default() -> Self {
        FedMgdConfig {
            mode: StageMode::TwoStage,
            gan_rounds: 200,
            enhance_rounds: 30,
            gan_batch: 64,
            refine_batch: 2048,
            label_sampling: LabelSamplingMode::ServerUniform,
            gan_lr: None,
        }
    }
}

impl ExperimentConfig {
    /// Adversarial-stage learning rate.
    pub fn gan_lr(&self) -> f64 {
        self.fedmgd.gan_lr.unwrap_or(self.lr)
    }
}

/// Full declarative description of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub resolution: usize,
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
    pub strategy: StrategyConfig,
    pub rounds: usize,
    pub client_fraction: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub noise_dim: usize,
    pub fedmgd: FedMgdConfig,
    pub threads: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::Synth {
                classes: 4,
                per_class: 50,
            },
            resolution: 8,
            num_clients: 2,
            alpha: 0.1,
            seed: 42,
            strategy: StrategyConfig::FedAvg,
            rounds: 10,
            client_fraction: 1.0,
            local_epochs: 10,
            batch_size: 32,
            lr: 0.0002,
            noise_dim: 16,
            fedmgd: FedMgdConfig::default(),
            threads: 1,
            out_dir: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

struct RawDataset {
    kind: Option<String>,
    classes: Option<usize>,
    per_class: Option<usize>,
    images: Option<PathBuf>,
    labels: Option<PathBuf>,
}

/// Parses and validates a config document, applying defaults for every key
/// that is absent. An empty document is the all-defaults run.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut raw_ds = RawDataset {
        kind: None,
        classes: None,
        per_class: None,
        images: None,
        labels: None,
    };
    let mut strategy_name: Option<String> = None;
    let mut mu: f64 = 0.01;
    let mut seen: Vec<String> = Vec::new();

    for (lineno, raw_line) in text.lines().enumerate() {
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(
                format!("line {}", lineno + 1),
                format!("expected `key = value`, got `{line}`"),
            )
        })?;
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() {
            return Err(Error::config(key, "empty value"));
        }
        if seen.iter().any(|k| k == key) {
            return Err(Error::config(key, "duplicate key"));
        }
        seen.push(key.to_string());

        match key {
            "dataset.kind" => raw_ds.kind = Some(value.to_string()),
            "dataset.classes" => raw_ds.classes = Some(parse_num(key, value)?),
            "dataset.per_class" => raw_ds.per_class = Some(parse_num(key, value)?),
            "dataset.images" => raw_ds.images = Some(PathBuf::from(value)),
            "dataset.labels" => raw_ds.labels = Some(PathBuf::from(value)),
            "resolution" => cfg.resolution = parse_num(key, value)?,
            "clients" => cfg.num_clients = parse_num(key, value)?,
            "alpha" => cfg.alpha = parse_num(key, value)?,
            "seed" => cfg.seed = parse_num(key, value)?,
            "strategy" => strategy_name = Some(value.to_string()),
            "fedprox.mu" => mu = parse_num(key, value)?,
            "rounds" => cfg.rounds = parse_num(key, value)?,
            "client_fraction" => cfg.client_fraction = parse_num(key, value)?,
            "local_epochs" => cfg.local_epochs = parse_num(key, value)?,
            "batch_size" => cfg.batch_size = parse_num(key, value)?,
            "lr" => cfg.lr = parse_num(key, value)?,
            "noise_dim" => cfg.noise_dim = parse_num(key, value)?,
            "threads" => cfg.threads = parse_num(key, value)?,
            "out.dir" => cfg.out_dir = Some(PathBuf::from(value)),
            "fedmgd.mode" => {
                cfg.fedmgd.mode = match value {
                    "two_stage" => StageMode::TwoStage,
                    "one_stage" => StageMode::OneStage,
                    other => {
                        return Err(Error::config(
                            key,
                            format!("expected two_stage|one_stage, got `{other}`"),
                        ))
                    }
                }
            }
            "fedmgd.gan_lr" => cfg.fedmgd.gan_lr = Some(parse_num(key, value)?),
            "fedmgd.gan_rounds" => cfg.fedmgd.gan_rounds = parse_num(key, value)?,
            "fedmgd.enhance_rounds" => cfg.fedmgd.enhance_rounds = parse_num(key, value)?,
            "fedmgd.gan_batch" => cfg.fedmgd.gan_batch = parse_num(key, value)?,
            "fedmgd.refine_batch" => cfg.fedmgd.refine_batch = parse_num(key, value)?,
            "fedmgd.label_sampling" => {
                cfg.fedmgd.label_sampling = match value {
                    "server_uniform" => LabelSamplingMode::ServerUniform,
                    "client_proportional" => LabelSamplingMode::ClientProportional,
                    other => {
                        return Err(Error::config(
                            key,
                            format!("expected server_uniform|client_proportional, got `{other}`"),
                        ))
                    }
                }
            }
            unknown => return Err(Error::config(unknown, "unknown key")),
        }
    }

    cfg.dataset = match raw_ds.kind.as_deref() {
        None | Some("synth") => {
            if raw_ds.images.is_some() || raw_ds.labels.is_some() {
                return Err(Error::config(
                    "dataset.images",
                    "only valid with dataset.kind = idx",
                ));
            }
            DatasetConfig::Synth {
                classes: raw_ds.classes.unwrap_or(4),
                per_class: raw_ds.per_class.unwrap_or(50),
            }
        }
        Some("idx") => {
            let images = raw_ds
                .images
                .ok_or_else(|| Error::config("dataset.images", "required for idx datasets"))?;
            let labels = raw_ds
                .labels
                .ok_or_else(|| Error::config("dataset.labels", "required for idx datasets"))?;
            DatasetConfig::Idx { images, labels }
        }
        Some(other) => {
            return Err(Error::config(
                "dataset.kind",
                format!("expected synth|idx, got `{other}`"),
            ))
        }
    };

    cfg.strategy = match strategy_name.as_deref() {
        None | Some("fedavg") => StrategyConfig::FedAvg,
        Some("fedprox") => StrategyConfig::FedProx { mu },
        Some("f2u") => StrategyConfig::F2u,
        Some("fedmgd") => StrategyConfig::FedMgd,
        Some(other) => {
            return Err(Error::config(
                "strategy",
                format!("expected fedavg|fedprox|f2u|fedmgd, got `{other}`"),
            ))
        }
    };

    validate(&cfg, mu)?;
    Ok(cfg)
}

fn validate(cfg: &ExperimentConfig, mu: f64) -> Result<()> {
    if !(cfg.alpha > 0.0) {
        return Err(Error::config("alpha", format!("must be > 0, got {}", cfg.alpha)));
    }
    if cfg.num_clients == 0 {
        return Err(Error::config("clients", "must be >= 1"));
    }
    if !(cfg.client_fraction > 0.0 && cfg.client_fraction <= 1.0) {
        return Err(Error::config(
            "client_fraction",
            format!("must be in (0, 1], got {}", cfg.client_fraction),
        ));
    }
    if cfg.resolution < 4 {
        return Err(Error::config("resolution", "must be >= 4"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be >= 1"));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::config("lr", format!("must be > 0, got {}", cfg.lr)));
    }
    if cfg.noise_dim == 0 {
        return Err(Error::config("noise_dim", "must be >= 1"));
    }
    if cfg.threads == 0 {
        return Err(Error::config("threads", "must be >= 1"));
    }
    if !(mu >= 0.0) {
        return Err(Error::config("fedprox.mu", format!("must be >= 0, got {mu}")));
    }
    if let DatasetConfig::Synth { classes, per_class } = &cfg.dataset {
        if *classes < 2 {
            return Err(Error::config("dataset.classes", "must be >= 2"));
        }
        if *per_class == 0 {
            return Err(Error::config("dataset.per_class", "must be >= 1"));
        }
    }
    if cfg.fedmgd.gan_batch == 0 {
        return Err(Error::config("fedmgd.gan_batch", "must be >= 1"));
    }
    if cfg.fedmgd.refine_batch == 0 {
        return Err(Error::config("fedmgd.refine_batch", "must be >= 1"));
    }
    if let Some(gan_lr) = cfg.fedmgd.gan_lr {
        if !(gan_lr > 0.0) {
            return Err(Error::config(
                "fedmgd.gan_lr",
                format!("must be > 0, got {gan_lr}"),
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_all_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(
            cfg.dataset,
            DatasetConfig::Synth {
                classes: 4,
                per_class: 50
            }
        );
        assert_eq!(cfg.strategy, StrategyConfig::FedAvg);
        assert_eq!(cfg.local_epochs, 10);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.lr, 0.0002);
    }

    #[test]
    fn negative_alpha_names_the_key() {
        let err = parse_config("alpha = -1").unwrap_err();
        match err {
            Error::Config { key, .. } => assert_eq!(key, "alpha"),
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn fedmgd_fields_map_to_stage_plan() {
        let cfg = parse_config("strategy = fedmgd\nfedmgd.gan_rounds = 200").unwrap();
        assert_eq!(cfg.strategy, StrategyConfig::FedMgd);
        assert_eq!(cfg.fedmgd.gan_rounds, 200);
        assert_eq!(cfg.fedmgd.enhance_rounds, 30);
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let err = parse_config("bananas = 3").unwrap_err();
        assert!(err.to_string().contains("bananas"), "{err}");
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = parse_config("# a comment\n\nclients = 5 # trailing\n").unwrap();
        assert_eq!(cfg.num_clients, 5);
    }

    #[test]
    fn duplicate_key_rejected() {
        let err = parse_config("seed = 1\nseed = 2").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn type_mismatch_names_key() {
        let err = parse_config("rounds = many").unwrap_err();
        assert!(err.to_string().contains("rounds"), "{err}");
    }

    #[test]
    fn idx_requires_both_paths() {
        let err = parse_config("dataset.kind = idx\ndataset.images = /tmp/x").unwrap_err();
        assert!(err.to_string().contains("dataset.labels"), "{err}");
        let cfg =
            parse_config("dataset.kind = idx\ndataset.images = /tmp/x\ndataset.labels = /tmp/y")
                .unwrap();
        assert!(matches!(cfg.dataset, DatasetConfig::Idx { .. }));
    }

    #[test]
    fn fedprox_mu_applies() {
        let cfg = parse_config("strategy = fedprox\nfedprox.mu = 0.5").unwrap();
        assert_eq!(cfg.strategy, StrategyConfig::FedProx { mu: 0.5 });
        let cfg = parse_config("strategy = fedprox").unwrap();
        assert_eq!(cfg.strategy, StrategyConfig::FedProx { mu: 0.01 });
    }

    #[test]
    fn sampling_mode_parses() {
        let cfg = parse_config("fedmgd.label_sampling = client_proportional").unwrap();
        assert_eq!(
            cfg.fedmgd.label_sampling,
            LabelSamplingMode::ClientProportional
        );
        assert!(parse_config("fedmgd.label_sampling = nonsense").is_err());
    }
}
