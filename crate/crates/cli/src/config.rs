//! Run configuration: defaults, TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use colony_core::dq::KdeConfig;
use colony_core::eval::CollectiveMode;
use colony_core::marriage::MarriageConfig;
use colony_core::nn::UpdateRule;
use colony_core::train::TrainConfig;
use colony_core::zoo::{ArchetypeKind, DEFAULT_WIDTH};
use colony_core::{ColonyError, Result};
use serde::{Deserialize, Serialize};

pub const DATA_DIR_ENV: &str = "COLONY_DATA_DIR";

/// Training epochs per archetype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Epochs {
    pub fast: u32,
    pub detailed: u32,
    pub organized: u32,
}

impl Epochs {
    pub fn of(&self, kind: ArchetypeKind) -> u32 {
        match kind {
            ArchetypeKind::Fast => self.fast,
            ArchetypeKind::Detailed => self.detailed,
            ArchetypeKind::Organized => self.organized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rule: UpdateRule,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 64,
            learning_rate: 1e-3,
            rule: UpdateRule::Adam {
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
        }
    }
}

impl TrainSettings {
    pub fn train_config(&self, epochs: u32, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            rule: self.rule,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding the MNIST training IDX files.
    pub data_dir: Option<PathBuf>,
    pub synthetic: bool,
    /// Fixture size in synthetic mode; one sixth is held out for testing.
    pub synthetic_n: usize,
    pub width: f64,
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub validation_fraction: f64,
    pub epochs: Epochs,
    /// Used instead of `epochs` in synthetic mode.
    pub synthetic_epochs: Epochs,
    /// Used instead of `training.batch_size` in synthetic mode.
    pub synthetic_batch_size: usize,
    pub founders_per_archetype: usize,
    pub training: TrainSettings,
    pub marriage: MarriageConfig,
    pub collective: CollectiveMode,
    pub kde: KdeConfig,
    pub out: PathBuf,
    /// Family worker threads; `None` means available cores, at most 9.
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: None,
            synthetic: false,
            synthetic_n: 1200,
            width: DEFAULT_WIDTH,
            seed: 0,
            train_size: 10_000,
            test_size: 2_000,
            validation_fraction: 0.1,
            epochs: Epochs {
                fast: 3,
                detailed: 3,
                organized: 7,
            },
            synthetic_epochs: Epochs {
                fast: 2,
                detailed: 2,
                organized: 3,
            },
            synthetic_batch_size: 16,
            founders_per_archetype: 2,
            training: TrainSettings::default(),
            marriage: MarriageConfig::default(),
            collective: CollectiveMode::default(),
            kde: KdeConfig::default(),
            out: PathBuf::from("colony-out"),
            workers: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ColonyError::Config(e.to_string().replace('\n', " ")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| ColonyError::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for kind in ArchetypeKind::ALL {
            if self.epochs.of(kind) == 0 || self.synthetic_epochs.of(kind) == 0 {
                return Err(ColonyError::Config(format!("{} epochs must be at least 1", kind.name())));
            }
        }
        if !(self.width > 0.0 && self.width <= 1.0) {
            return Err(ColonyError::Config(format!("width {} outside (0, 1]", self.width)));
        }
        if self.founders_per_archetype < 2 {
            return Err(ColonyError::Config("intra-marriage needs two founders per archetype".into()));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(ColonyError::Config("train and test sizes must be positive".into()));
        }
        if self.synthetic && self.synthetic_n < 60 {
            return Err(ColonyError::Config(format!("synthetic n = {} is below 60", self.synthetic_n)));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(ColonyError::Config("validation fraction must lie in [0, 0.5)".into()));
        }
        if self.training.batch_size == 0 || self.synthetic_batch_size == 0 {
            return Err(ColonyError::Config("batch size must be positive".into()));
        }
        if self.workers == Some(0) {
            return Err(ColonyError::Config("workers must be at least 1".into()));
        }
        self.marriage.validate()
    }

    /// Epoch schedule for the active data source.
    pub fn schedule(&self) -> Epochs {
        if self.synthetic {
            self.synthetic_epochs
        } else {
            self.epochs
        }
    }

    /// Optimizer settings for the active data source.
    pub fn train_settings(&self) -> TrainSettings {
        if self.synthetic {
            TrainSettings {
                batch_size: self.synthetic_batch_size,
                ..self.training
            }
        } else {
            self.training
        }
    }

    /// (train, test) sizes for the active data source.
    pub fn split_sizes(&self) -> (usize, usize) {
        if self.synthetic {
            let test = self.synthetic_n / 6;
            (self.synthetic_n - test, test)
        } else {
            (self.train_size, self.test_size)
        }
    }

    /// Data directory from the config, else `COLONY_DATA_DIR`.
    pub fn resolved_data_dir(&self) -> Result<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| {
                ColonyError::Config(format!("no data directory: pass --data-dir, set {DATA_DIR_ENV} or use --synthetic"))
            })
    }

    pub fn worker_count(&self) -> usize {
        self.workers.unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
                .min(9)
        })
    }
}
