//! `manifest.json` of an experiment root: one entry per run directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vbpt_core::trainer::{RunStatus, RunSummary};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the experiment root.
    pub path: PathBuf,
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub status: RunStatus,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub runs: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let p = root.join(MANIFEST);
        if !p.exists() {
            return Ok(Manifest::default());
        }
        serde_json::from_slice(&fs::read(&p)?).with_context(|| format!("reading {}", p.display()))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root)?;
        let tmp = root.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, root.join(MANIFEST))?;
        Ok(())
    }

    /// Inserts or replaces the entry with the same id.
    pub fn upsert(&mut self, e: ManifestEntry) {
        match self.runs.iter_mut().find(|r| r.id == e.id) {
            Some(r) => *r = e,
            None => self.runs.push(e),
        }
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.runs.iter().find(|r| r.id == id)
    }

    /// Re-reads each run's status from its `run.json`.
    pub fn refresh(&mut self, root: &Path) -> Result<()> {
        for r in &mut self.runs {
            if let Ok(s) = RunSummary::load(&root.join(&r.path)) {
                r.status = s.status;
            }
        }
        Ok(())
    }

    /// Entries whose stored `config.toml` is missing or no longer hashes to
    /// the recorded value.
    pub fn verify(&self, root: &Path) -> Vec<String> {
        self.runs
            .iter()
            .filter_map(|r| {
                let p = root.join(&r.path).join("config.toml");
                match fs::read(&p) {
                    Ok(bytes) if hex::encode(Sha256::digest(&bytes)) == r.config_hash => None,
                    Ok(_) => Some(format!("{}: stored config does not match its hash", r.id)),
                    Err(_) if r.status == RunStatus::Pending => None,
                    Err(e) => Some(format!("{}: {e}", r.id)),
                }
            })
            .collect()
    }
}
