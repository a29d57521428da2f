//! Per-run-directory record of completed stages and their output checksums.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pipeline::{read_json, write_json};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Preprocess,
    Embed,
    Align,
    Pretrain,
    Finetune,
    Iterative,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Embed => "embed",
            Stage::Align => "align",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Iterative => "iterative",
            Stage::Evaluate => "evaluate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub complete: bool,
    pub outputs: Vec<OutputRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` when set.
    pub created_at: u64,
    pub config_path: Option<String>,
    pub stages: BTreeMap<Stage, StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn now() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        })
}

impl RunManifest {
    /// Loads `dir/manifest.json`, or starts a new manifest named after `dir`.
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            return read_json(&path);
        }
        let run_id = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".to_string());
        Ok(Self {
            run_id,
            created_at: now(),
            config_path: None,
            stages: BTreeMap::new(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join(MANIFEST_FILE), self)
    }

    /// Whether `stage` is recorded complete and every output still matches
    /// its checksum.
    pub fn verified(&self, dir: &Path, stage: Stage) -> bool {
        let Some(rec) = self.stages.get(&stage) else {
            return false;
        };
        rec.complete
            && rec.outputs.iter().all(|o| {
                let p = dir.join(&o.path);
                sha256_file(&p).map(|h| h == o.sha256).unwrap_or(false)
            })
    }

    pub fn require(&self, dir: &Path, stage: Stage) -> Result<()> {
        if self.verified(dir, stage) {
            Ok(())
        } else {
            Err(Error::MissingStage(format!(
                "{} (run `unmt {}` first)",
                stage.name(),
                command_for(stage)
            )))
        }
    }

    /// Checksums `outputs` (relative to `dir`) and marks `stage` complete.
    pub fn complete(&mut self, dir: &Path, stage: Stage, outputs: &[PathBuf]) -> Result<()> {
        let mut records = Vec::with_capacity(outputs.len());
        for rel in outputs {
            let p = dir.join(rel);
            if !p.exists() {
                return Err(Error::MissingStage(format!("{}: output {} missing", stage.name(), rel.display())));
            }
            records.push(OutputRecord {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: sha256_file(&p)?,
            });
        }
        self.stages.insert(
            stage,
            StageRecord {
                complete: true,
                outputs: records,
            },
        );
        self.save(dir)
    }

    /// Drops the completion mark of `stage`, e.g. before it is rerun.
    pub fn invalidate(&mut self, stage: Stage) {
        self.stages.remove(&stage);
    }
}

fn command_for(stage: Stage) -> &'static str {
    match stage {
        Stage::Preprocess => "preprocess",
        Stage::Embed => "train-embeddings",
        Stage::Align => "align",
        Stage::Pretrain => "pretrain",
        Stage::Finetune => "finetune",
        Stage::Iterative => "train-iterative",
        Stage::Evaluate => "evaluate",
    }
}
