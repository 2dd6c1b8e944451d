//! On-disk layout of a colony output directory.
//!
//! ```text
//! <out>/split.json           split manifest
//! <out>/colony/              registry (colony.jsonl + weights/)
//! <out>/evals/<agent>.json   evaluation records
//! <out>/table1.csv, table2.csv, dq.json, roc_*.svg
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use colony_core::data::{self, LabeledImage, MnistFiles, Provenance};
use colony_core::eval::Evaluation;
use colony_core::registry::{FamilyRecord, Registry};
use colony_core::{seed, ColonyError, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const SPLIT_FILE: &str = "split.json";
pub const REGISTRY_DIR: &str = "colony";
pub const EVAL_DIR: &str = "evals";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Mnist { dir: PathBuf },
    Synthetic { n: usize, fixture_seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub source: DataSource,
    pub provenance: Provenance,
    pub validation_fraction: f64,
    pub train: usize,
    pub test: usize,
    pub train_index: Vec<usize>,
    pub test_index: Vec<usize>,
}

/// Materialized split: `fit` is the training set minus the validation carve.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: SplitManifest,
    pub fit: Vec<LabeledImage>,
    pub valid: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl Dataset {
    /// Nominal training-set size `s` of family records.
    pub fn train_size(&self) -> usize {
        self.manifest.train
    }

    pub fn task_id(&self) -> String {
        match &self.manifest.source {
            DataSource::Mnist { .. } => format!("mnist-{}", self.manifest.train),
            DataSource::Synthetic { n, .. } => format!("synthetic-{n}"),
        }
    }
}

fn source_images(source: &DataSource) -> Result<(Vec<LabeledImage>, Provenance)> {
    match source {
        DataSource::Mnist { dir } => MnistFiles::under(dir).load(),
        DataSource::Synthetic { n, fixture_seed } => Ok((
            data::synthetic_fixture(*n, *fixture_seed)?,
            Provenance {
                source: format!("synthetic n={n}"),
                images_sha256: None,
                labels_sha256: None,
                seed: *fixture_seed,
            },
        )),
    }
}

fn materialize(manifest: SplitManifest, full: &[LabeledImage]) -> Result<Dataset> {
    let pick = |idx: &[usize]| -> Result<Vec<LabeledImage>> {
        idx.iter()
            .map(|&i| {
                full.get(i)
                    .cloned()
                    .ok_or_else(|| ColonyError::Input(format!("split index {i} beyond {} source images", full.len())))
            })
            .collect()
    };
    let train = pick(&manifest.train_index)?;
    let test = pick(&manifest.test_index)?;
    let (fit, valid) = data::carve_validation(&train, manifest.validation_fraction, manifest.provenance.seed)?;
    Ok(Dataset {
        manifest,
        fit,
        valid,
        test,
    })
}

/// Build the constrained split described by `cfg`.
pub fn ingest(cfg: &RunConfig) -> Result<Dataset> {
    let source = if cfg.synthetic {
        DataSource::Synthetic {
            n: cfg.synthetic_n,
            fixture_seed: seed::derive(cfg.seed, "fixture"),
        }
    } else {
        DataSource::Mnist {
            dir: cfg.resolved_data_dir()?,
        }
    };
    let (full, provenance) = source_images(&source)?;
    let (n_train, n_test) = cfg.split_sizes();
    let split = data::constrained_split(&full, n_train, n_test, seed::derive(cfg.seed, "split"), provenance)?;
    let manifest = SplitManifest {
        source,
        provenance: split.provenance,
        validation_fraction: cfg.validation_fraction,
        train: split.train.len(),
        test: split.test.len(),
        train_index: split.train_index,
        test_index: split.test_index,
    };
    materialize(manifest, &full)
}

/// Reload the split recorded in `<out>/split.json`, checking source hashes.
pub fn load_dataset(out: &Path) -> Result<Dataset> {
    let manifest: SplitManifest = read_json(&out.join(SPLIT_FILE))?;
    let (full, provenance) = source_images(&manifest.source)?;
    if provenance.images_sha256 != manifest.provenance.images_sha256
        || provenance.labels_sha256 != manifest.provenance.labels_sha256
    {
        return Err(ColonyError::State(format!(
            "data under {} no longer matches the recorded split",
            provenance.source
        )));
    }
    materialize(manifest, &full)
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| ColonyError::io(dir, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| ColonyError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| ColonyError::State(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| ColonyError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ColonyError::Load {
        position: format!("{} line {}", path.display(), e.line()),
        message: e.to_string(),
    })
}

pub fn save_manifest(out: &Path, data: &Dataset) -> Result<()> {
    create_dir(out)?;
    write_json(&out.join(SPLIT_FILE), &data.manifest)
}

pub fn open_registry(out: &Path) -> Result<Registry> {
    let dir = out.join(REGISTRY_DIR);
    if dir.join("colony.jsonl").exists() {
        Registry::load(&dir)
    } else {
        Ok(Registry::new())
    }
}

pub fn save_registry(out: &Path, registry: &Registry) -> Result<()> {
    registry.persist(out.join(REGISTRY_DIR))
}

/// Scores of one agent on the three splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub agent: String,
    pub family: Option<FamilyRecord>,
    pub train_macro_f1: f64,
    pub valid_macro_f1: f64,
    pub test_macro_f1: f64,
    pub test_accuracy: f64,
    /// Per-class test F1.
    pub test_f1: Vec<f64>,
    pub valid_f1: Vec<f64>,
    /// Wall-clock seconds spent training since birth.
    pub duration_seconds: f64,
    /// Flattened test softmax scores, `classes` per image.
    pub test_scores: Vec<f64>,
    pub test_labels: Vec<usize>,
}

impl EvalRecord {
    pub fn new(
        agent: String,
        family: Option<FamilyRecord>,
        train: &Evaluation,
        valid: &Evaluation,
        test: &Evaluation,
        duration_seconds: f64,
    ) -> Self {
        EvalRecord {
            agent,
            family,
            train_macro_f1: train.row.average,
            valid_macro_f1: valid.row.average,
            test_macro_f1: test.row.average,
            test_accuracy: test.confusion.accuracy(),
            test_f1: test.row.f1.clone(),
            valid_f1: valid.row.f1.clone(),
            duration_seconds,
            test_scores: test.scores.scores.clone(),
            test_labels: test.scores.labels.clone(),
        }
    }
}

pub fn save_eval(out: &Path, record: &EvalRecord) -> Result<()> {
    let dir = out.join(EVAL_DIR);
    create_dir(&dir)?;
    write_json(&dir.join(format!("{}.json", record.agent)), record)
}

/// All evaluation records, ordered by agent id.
pub fn load_evals(out: &Path) -> Result<Vec<EvalRecord>> {
    let dir = out.join(EVAL_DIR);
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| ColonyError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_json(p)).collect()
}
