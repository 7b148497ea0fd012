//! Experiment configuration: a flat TOML file merged with command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};

use cmim_core::contrastive::{TAU_IMAGES, TAU_TOY};
use cmim_core::eval::MlpProbeConfig;
use cmim_core::experiments::{EvalConfig, Toy2dConfig};
use cmim_core::models::{ModelConfig, Objective};
use cmim_core::objectives::TrainConfig;
use serde::{Deserialize, Serialize};

/// Steps per run at desk scale and with `--full-scale`.
pub const DESK_STEPS: usize = 20_000;
pub const FULL_SCALE_STEPS: usize = 500_000;
pub const DEFAULT_DATA_DIR: &str = "data/mnist10k";
pub const SWEEP_BATCH_SIZES: [usize; 5] = [2, 5, 10, 100, 200];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Toy2d,
    Train,
    Sweep,
    Evaluate,
    Report,
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::Toy2d => "toy2d",
            Experiment::Train => "train",
            Experiment::Sweep => "sweep",
            Experiment::Evaluate => "evaluate",
            Experiment::Report => "report",
        })
    }
}

/// Everything a config file may set. Every key is optional and unknown keys
/// are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub experiment: Option<Experiment>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub full_scale: Option<bool>,
    pub jobs: Option<usize>,

    pub objective: Option<Objective>,
    pub batch_size: Option<usize>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub tau: Option<f64>,
    pub val_interval: Option<usize>,
    pub log_interval: Option<usize>,
    pub val_fraction: Option<f64>,
    pub latent_dim: Option<usize>,
    pub encoder_hidden: Option<Vec<usize>>,
    pub decoder_hidden: Option<Vec<usize>>,

    pub objectives: Option<Vec<Objective>>,
    pub batch_sizes: Option<Vec<usize>>,
    pub seeds: Option<Vec<u64>>,

    pub dataset: Option<String>,
    pub data_dir: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,

    pub checkpoint: Option<PathBuf>,
    pub records: Option<PathBuf>,

    pub knn_k: Option<usize>,
    pub mlp_hidden: Option<usize>,
    pub mlp_steps: Option<usize>,
    pub mlp_lr: Option<f64>,
    pub mlp_batch_size: Option<usize>,
    pub informative: Option<bool>,
    pub reconstruction: Option<bool>,

    pub snapshots: Option<Vec<usize>>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Overlay `other` on `self`; keys set in `other` win.
    pub fn merge(self, other: FileConfig) -> FileConfig {
        macro_rules! pick {
            ($($f:ident),*) => { FileConfig { $($f: other.$f.or(self.$f)),* } };
        }
        pick!(
            experiment, seed, out, full_scale, jobs, objective, batch_size, steps, lr, tau, val_interval,
            log_interval, val_fraction, latent_dim, encoder_hidden, decoder_hidden, objectives, batch_sizes, seeds,
            dataset, data_dir, train_images, train_labels, test_images, test_labels, checkpoint, records, knn_k,
            mlp_hidden, mlp_steps, mlp_lr, mlp_batch_size, informative, reconstruction, snapshots
        )
    }
}

/// IDX image/label file pair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Split {
    pub images: PathBuf,
    pub labels: PathBuf,
}

/// A fully resolved experiment: defaults applied, paths absolute and checked.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub out: PathBuf,
    pub jobs: usize,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub objectives: Vec<Objective>,
    pub batch_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub train_split: Option<Split>,
    pub test_split: Option<Split>,
    pub checkpoint: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub toy: Option<Toy2dConfig>,
}

#[derive(Debug)]
pub enum ConfigError {
    /// Values that parse but make no sense.
    Invalid(String),
    /// Missing inputs or unreadable/malformed config text.
    Io(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Invalid(m) => write!(f, "invalid configuration: {m}"),
            ConfigError::Io(m) => f.write_str(m),
        }
    }
}

fn absolute(p: &Path) -> Result<PathBuf, ConfigError> {
    std::path::absolute(p).map_err(|e| ConfigError::Io(format!("{}: {e}", p.display())))
}

fn existing(p: &Path) -> Result<PathBuf, ConfigError> {
    let abs = absolute(p)?;
    if !abs.exists() {
        return Err(ConfigError::Io(format!("{}: no such file or directory", abs.display())));
    }
    Ok(abs)
}

fn split(
    dir: &Path,
    prefix: &str,
    images: Option<&PathBuf>,
    labels: Option<&PathBuf>,
) -> Result<Split, ConfigError> {
    let images = images.cloned().unwrap_or_else(|| dir.join(format!("{prefix}-images-idx3-ubyte.gz")));
    let labels = labels.cloned().unwrap_or_else(|| dir.join(format!("{prefix}-labels-idx1-ubyte.gz")));
    Ok(Split { images: existing(&images)?, labels: existing(&labels)? })
}

impl ExperimentConfig {
    /// Apply defaults for `experiment` and check every input path.
    pub fn resolve(experiment: Experiment, c: FileConfig) -> Result<Self, ConfigError> {
        if let Some(e) = c.experiment {
            if e != experiment {
                return Err(ConfigError::Invalid(format!("config is for `{e}` but `{experiment}` was requested")));
            }
        }
        let seed = c.seed.unwrap_or(0);
        let toy = experiment == Experiment::Toy2d;
        let full = c.full_scale.unwrap_or(false);
        let default_steps = if toy {
            Toy2dConfig::default().steps
        } else if full {
            FULL_SCALE_STEPS
        } else {
            DESK_STEPS
        };
        let objective = c.objective.unwrap_or(Objective::Cmim);
        let mut train = TrainConfig::new(objective, c.batch_size.unwrap_or(100), c.steps.unwrap_or(default_steps));
        train.seed = seed;
        train.tau = c.tau.unwrap_or(if toy { TAU_TOY } else { TAU_IMAGES });
        train.lr = c.lr.unwrap_or(if toy { Toy2dConfig::default().lr } else { train.lr });
        train.val_interval = c.val_interval.unwrap_or(train.val_interval);
        train.log_interval = c.log_interval.unwrap_or(train.log_interval);
        train.val_fraction = c.val_fraction.unwrap_or(train.val_fraction);
        train.dataset = c.dataset.clone().unwrap_or(train.dataset);
        let d = ModelConfig::default();
        train.model = ModelConfig {
            input_dim: d.input_dim,
            encoder_hidden: c.encoder_hidden.clone().unwrap_or(d.encoder_hidden),
            latent_dim: c.latent_dim.unwrap_or(d.latent_dim),
            decoder_hidden: c.decoder_hidden.clone().unwrap_or(d.decoder_hidden),
        };
        if !toy {
            train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }

        let m = MlpProbeConfig::default();
        let eval = EvalConfig {
            knn_k: c.knn_k.unwrap_or(5),
            mlp: MlpProbeConfig {
                hidden: c.mlp_hidden.unwrap_or(m.hidden),
                steps: c.mlp_steps.unwrap_or(m.steps),
                lr: c.mlp_lr.unwrap_or(m.lr),
                batch_size: c.mlp_batch_size.unwrap_or(m.batch_size),
                seed,
            },
            informative: c.informative.unwrap_or(true),
            reconstruction: c.reconstruction.unwrap_or(true),
        };
        if eval.knn_k == 0 || eval.mlp.batch_size == 0 {
            return Err(ConfigError::Invalid("knn_k and mlp_batch_size must be positive".into()));
        }

        let (objectives, batch_sizes) = if experiment == Experiment::Sweep {
            (
                c.objectives.clone().or(c.objective.map(|o| vec![o])).unwrap_or_else(|| Objective::ALL.to_vec()),
                c.batch_sizes.clone().or(c.batch_size.map(|b| vec![b])).unwrap_or_else(|| SWEEP_BATCH_SIZES.to_vec()),
            )
        } else {
            (vec![objective], vec![train.batch_size])
        };
        for &objective in &objectives {
            for &batch_size in &batch_sizes {
                TrainConfig { objective, batch_size, ..train.clone() }
                    .validate()
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
        }
        let seeds = c.seeds.clone().unwrap_or_else(|| vec![seed]);
        if seeds.is_empty() || objectives.is_empty() || batch_sizes.is_empty() {
            return Err(ConfigError::Invalid("objectives, batch_sizes and seeds must be non-empty".into()));
        }

        let needs_data = matches!(experiment, Experiment::Train | Experiment::Sweep | Experiment::Evaluate);
        let dir = c.data_dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
        let (train_split, test_split) = if needs_data {
            let tr = split(&dir, "train", c.train_images.as_ref(), c.train_labels.as_ref())?;
            let te = if experiment == Experiment::Train {
                None
            } else {
                Some(split(&dir, "t10k", c.test_images.as_ref(), c.test_labels.as_ref())?)
            };
            (Some(tr), te)
        } else {
            (None, None)
        };

        let checkpoint = match (&c.checkpoint, experiment) {
            (Some(p), Experiment::Evaluate) => Some(existing(p)?),
            (None, Experiment::Evaluate) => {
                return Err(ConfigError::Invalid("evaluate needs a checkpoint".into()));
            }
            _ => None,
        };
        let records = match (&c.records, experiment) {
            (Some(p), Experiment::Report) => Some(existing(p)?),
            (None, Experiment::Report) => return Err(ConfigError::Invalid("report needs a records directory".into())),
            _ => None,
        };

        let toy = if toy {
            let snapshots = c.snapshots.clone().unwrap_or_else(|| {
                let mut s: Vec<usize> = Toy2dConfig::default().snapshots;
                s.retain(|&v| v < train.total_steps);
                s.push(train.total_steps);
                s
            });
            Some(Toy2dConfig { seed, steps: train.total_steps, lr: train.lr, tau: train.tau, snapshots })
        } else {
            None
        };

        let out = absolute(&c.out.clone().unwrap_or_else(|| PathBuf::from(format!("runs/{experiment}"))))?;
        let jobs = c.jobs.unwrap_or(1);
        if jobs == 0 {
            return Err(ConfigError::Invalid("jobs must be positive".into()));
        }
        Ok(ExperimentConfig {
            experiment,
            out,
            jobs,
            train,
            eval,
            objectives,
            batch_sizes,
            seeds,
            train_split,
            test_split,
            checkpoint,
            records,
            toy,
        })
    }
}
