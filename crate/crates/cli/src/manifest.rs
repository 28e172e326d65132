//! Run manifest: records what each stage produced so reruns skip finished
//! work. The manifest is keyed by the config's result hash; resuming with a
//! different effective config in the same directory is refused.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use cfbase_core::io::write_atomic;
use serde::{Deserialize, Serialize};

use crate::PipelineError;

/// Pipeline stages in execution order.
pub const STAGES: [&str; 6] =
    ["gen-data", "train-classifier", "train-vae", "attribute", "evaluate", "report"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: String,
    pub wall_ms: u64,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    /// Loads the manifest for this run directory, or starts a fresh one.
    /// An existing manifest with a different config hash is an error: the
    /// directory holds results of a different experiment.
    pub fn load_or_new(out_dir: &Path, config_hash: &str) -> Result<Self> {
        let path = Self::path(out_dir);
        if !path.exists() {
            return Ok(RunManifest {
                toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
                config_hash: config_hash.to_string(),
                stages: BTreeMap::new(),
            });
        }
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading manifest {}", path.display()))?;
        let manifest: RunManifest = serde_json::from_str(&text)
            .with_context(|| format!("parsing manifest {}", path.display()))?;
        if manifest.config_hash != config_hash {
            return Err(PipelineError::Config(format!(
                "output directory {} holds a run with config hash {}…, current config hashes to {}…; \
                 use a fresh --out or restore the original config",
                out_dir.display(),
                &manifest.config_hash[..12.min(manifest.config_hash.len())],
                &config_hash[..12.min(config_hash.len())]
            ))
            .into());
        }
        Ok(manifest)
    }

    /// True when the stage already ran to completion and everything it
    /// produced is still on disk.
    pub fn stage_done(&self, out_dir: &Path, stage: &str) -> bool {
        match self.stages.get(stage) {
            Some(rec) if rec.status == "done" => {
                rec.artifacts.iter().all(|rel| out_dir.join(rel).exists())
            }
            _ => false,
        }
    }

    /// Marks a stage complete and persists the manifest atomically.
    pub fn record(
        &mut self,
        out_dir: &Path,
        stage: &str,
        wall: Duration,
        artifacts: Vec<String>,
    ) -> Result<()> {
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                status: "done".to_string(),
                wall_ms: wall.as_millis() as u64,
                artifacts,
            },
        );
        self.save(out_dir)
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).context("serializing manifest")?;
        text.push('\n');
        write_atomic(&Self::path(out_dir), text.as_bytes())
            .with_context(|| format!("writing {}", Self::path(out_dir).display()))?;
        Ok(())
    }

    /// Errors with the exact stage to run first when a prerequisite of
    /// `stage` has not completed.
    pub fn require_done(&self, out_dir: &Path, stage: &str, prerequisite: &str) -> Result<()> {
        if self.stage_done(out_dir, prerequisite) {
            Ok(())
        } else {
            Err(PipelineError::Prerequisite {
                stage: stage.to_string(),
                needed: prerequisite.to_string(),
            }
            .into())
        }
    }
}
