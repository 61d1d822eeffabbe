//! Fine-tuning job contract: formatted training files, hyperparameters, and
//! the early-stopping rule. The gradient loop itself belongs to an external trainer.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{MultimodalExample, SplitAssignment, SplitPart};
use crate::image_signals::ImageSignals;
use crate::promptkit::{format_prompt, PromptError};

#[derive(Debug, Error)]
pub enum TrainJobError {
    #[error("no image signals for example {0}")]
    MissingSignals(String),
    #[error("split names unknown example {0}")]
    UnknownExample(String),
    #[error("example {id}: {source}")]
    Prompt { id: String, source: PromptError },
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    #[default]
    NextWordPrediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyperparams {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub effective_batch: usize,
    pub grad_clip_norm: f64,
    pub objective: Objective,
}

impl Default for TrainHyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            max_epochs: 8,
            early_stop_patience: 3,
            batch_size: 3,
            grad_accum_steps: 4,
            effective_batch: 12,
            grad_clip_norm: 1.0,
            objective: Objective::NextWordPrediction,
        }
    }
}

impl TrainHyperparams {
    pub fn validate(&self) -> Result<(), TrainJobError> {
        let bad = |m: &str| Err(TrainJobError::InvalidHyperparams(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.max_epochs == 0 || self.early_stop_patience == 0 {
            return bad("max_epochs and early_stop_patience must be at least 1");
        }
        if self.batch_size == 0 || self.grad_accum_steps == 0 {
            return bad("batch_size and grad_accum_steps must be at least 1");
        }
        if self.effective_batch != self.batch_size * self.grad_accum_steps {
            return bad("effective_batch must equal batch_size * grad_accum_steps");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub input: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub count: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestFile>,
    /// Whether the trainer restores the best-validation checkpoint is left to it.
    pub best_checkpoint: String,
}

impl Manifest {
    pub fn file(&self, path: &str) -> Option<&ManifestFile> {
        self.files.iter().find(|f| f.path == path)
    }
}

/// Builds the training records of one split part, in split order.
pub fn records_for(
    examples: &[MultimodalExample],
    signals: &HashMap<String, ImageSignals>,
    ids: &[String],
) -> Result<Vec<TrainRecord>, TrainJobError> {
    let by_id: HashMap<&str, &MultimodalExample> =
        examples.iter().map(|e| (e.id.as_str(), e)).collect();
    ids.iter()
        .map(|id| {
            let ex = by_id
                .get(id.as_str())
                .ok_or_else(|| TrainJobError::UnknownExample(id.clone()))?;
            let sig = signals
                .get(id)
                .ok_or_else(|| TrainJobError::MissingSignals(id.clone()))?;
            let prompt = format_prompt(&ex.background_text, &sig.description, &sig.ocr_text, id)
                .map_err(|source| TrainJobError::Prompt {
                    id: id.clone(),
                    source,
                })?;
            Ok(TrainRecord {
                input: prompt.text,
                target: ex.reference_question.clone(),
            })
        })
        .collect()
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], count: usize) -> Result<ManifestFile, TrainJobError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|source| TrainJobError::Io { path, source })?;
    Ok(ManifestFile {
        path: name.to_string(),
        count,
        sha256: hex::encode(Sha256::digest(bytes)),
    })
}

fn to_jsonl(records: &[TrainRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    out
}

/// Writes `train.jsonl`, `validation.jsonl`, `test.jsonl`, `hyperparams.json`
/// and `manifest.json` into `out_dir`.
///
/// Every record is built before anything is written, so a missing id leaves
/// the directory untouched.
pub fn export_train_files(
    examples: &[MultimodalExample],
    signals: &HashMap<String, ImageSignals>,
    split: &SplitAssignment,
    hyperparams: &TrainHyperparams,
    out_dir: &Path,
) -> Result<Manifest, TrainJobError> {
    hyperparams.validate()?;
    let parts = SplitPart::ALL
        .iter()
        .map(|&p| Ok((p, records_for(examples, signals, split.part(p))?)))
        .collect::<Result<Vec<_>, TrainJobError>>()?;
    fs::create_dir_all(out_dir).map_err(|source| TrainJobError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for (part, records) in &parts {
        let name = format!("{}.jsonl", part.name());
        files.push(write_file(out_dir, &name, &to_jsonl(records), records.len())?);
    }
    let mut hp = serde_json::to_vec_pretty(hyperparams).expect("hyperparams serialize");
    hp.push(b'\n');
    files.push(write_file(out_dir, "hyperparams.json", &hp, 1)?);
    let manifest = Manifest {
        files,
        best_checkpoint: "trainer-defined".into(),
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    let path = out_dir.join("manifest.json");
    fs::write(&path, bytes).map_err(|source| TrainJobError::Io { path, source })?;
    Ok(manifest)
}

/// True once the best (first minimal) validation loss is at least `patience`
/// epochs old. Equal losses do not count as improvement.
///
/// # Panics
/// If `patience` is zero.
pub fn should_stop<T: PartialOrd + Copy>(val_losses: &[T], patience: usize) -> bool {
    assert!(patience >= 1, "patience must be at least 1");
    let mut best = 0;
    for (i, &l) in val_losses.iter().enumerate().skip(1) {
        if l < val_losses[best] {
            best = i;
        }
    }
    !val_losses.is_empty() && best + patience < val_losses.len()
}
