//! On-disk layout of one run: config snapshot, status, metrics streams,
//! batch-id audit log and checkpoints. One process owns a run directory at a
//! time, enforced by a lock file.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vbpt_autodiff::Scalar;

use super::{AuditRecord, EvalMetrics, MetricsRecord, ProbeRecord, TrainOutput};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};

/// Version of the metrics CSV column contract.
pub const METRICS_VERSION: u32 = 1;

/// Frozen column order of `metrics.csv`.
pub const METRICS_COLUMNS: &[&str] = &[
    "step",
    "tokens",
    "l_pre",
    "lr",
    "grad_norm",
    "meta_step",
    "v",
    "eta_v",
    "meta_loss",
    "designer_stat",
    "eval",
    "eval_secondary",
    "best_so_far",
    "step_time",
    "value_time",
];

const PROBE_COLUMNS: &[&str] = &["step", "predicted", "realized"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Pending,
    Running,
    Done,
    Failed,
}

/// Contents of `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub method: String,
    pub seed: u64,
    pub status: RunStatus,
    pub steps_done: u64,
    pub total_steps: u64,
    pub metrics_version: u32,
    pub final_eval: Option<EvalMetrics>,
    pub theta_checksum: Option<String>,
    pub phi_checksum: Option<String>,
    pub designer_updates: u64,
}

impl RunSummary {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join("run.json"))?)?)
    }
}

pub struct RunDir {
    path: PathBuf,
    summary: RunSummary,
    metrics_csv: Option<csv::Writer<File>>,
    metrics_jsonl: Option<BufWriter<File>>,
    probes_csv: Option<csv::Writer<File>>,
    audit: Option<BufWriter<File>>,
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn metrics_row(r: &MetricsRecord) -> Vec<String> {
    vec![
        r.step.to_string(),
        r.tokens.to_string(),
        r.l_pre.to_string(),
        r.lr.to_string(),
        r.grad_norm.to_string(),
        (r.meta_step as u8).to_string(),
        opt(r.v),
        opt(r.predicted_improvement),
        opt(r.meta_loss),
        opt(r.designer_stat),
        opt(r.eval),
        opt(r.eval_secondary),
        opt(r.best_so_far),
        r.step_time.to_string(),
        r.value_time.to_string(),
    ]
}

fn read_lines<R: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<R>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Every record of a run's `metrics.jsonl`.
pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRecord>> {
    read_lines(&dir.join("metrics.jsonl"))
}

pub fn read_probes(dir: &Path) -> Result<Vec<ProbeRecord>> {
    let path = dir.join("probes.csv");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut rd = csv::Reader::from_path(path)?;
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

pub fn read_audit(dir: &Path) -> Result<Vec<AuditRecord>> {
    read_lines(&dir.join("audit.jsonl"))
}

impl RunDir {
    /// Takes the lock and prepares the directory. A fresh run refuses a
    /// directory that already holds results.
    pub fn open(path: &Path, cfg: &RunConfig, hash: &str, resume: bool) -> Result<Self> {
        fs::create_dir_all(path.join("checkpoints"))?;
        let lock = path.join("lock");
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|_| Error::Config(format!("run directory {} is locked by another process", path.display())))?;
        let mut dir = RunDir {
            path: path.to_path_buf(),
            summary: RunSummary {
                config_hash: hash.to_string(),
                method: cfg.method.name().to_string(),
                seed: cfg.seed,
                status: RunStatus::Running,
                steps_done: 0,
                total_steps: cfg.steps,
                metrics_version: METRICS_VERSION,
                final_eval: None,
                theta_checksum: None,
                phi_checksum: None,
                designer_updates: 0,
            },
            metrics_csv: None,
            metrics_jsonl: None,
            probes_csv: None,
            audit: None,
        };
        if resume {
            let stored = fs::read_to_string(path.join("config.toml")).map_err(|_| Error::Config("nothing to resume".into()))?;
            if stored != cfg.to_toml()? {
                return Err(Error::Config("stored config differs from the one given for resume".into()));
            }
        } else {
            if path.join("metrics.jsonl").exists() {
                return Err(Error::Config(format!("{} already holds a run; resume it or pick a new directory", path.display())));
            }
            fs::write(path.join("config.toml"), cfg.to_toml()?)?;
            dir.reset_streams(&[], &[], &[])?;
        }
        dir.write_summary()?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn write_summary(&self) -> Result<()> {
        let tmp = self.path.join("run.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(&self.summary)?)?;
        fs::rename(tmp, self.path.join("run.json"))?;
        Ok(())
    }

    /// Rewrites every stream from the given prefix.
    fn reset_streams(&mut self, records: &[MetricsRecord], probes: &[ProbeRecord], audit: &[AuditRecord]) -> Result<()> {
        let mut mc = csv::Writer::from_path(self.path.join("metrics.csv"))?;
        mc.write_record(METRICS_COLUMNS)?;
        let mut mj = BufWriter::new(File::create(self.path.join("metrics.jsonl"))?);
        let mut pc = csv::Writer::from_path(self.path.join("probes.csv"))?;
        pc.write_record(PROBE_COLUMNS)?;
        let mut au = BufWriter::new(File::create(self.path.join("audit.jsonl"))?);
        for r in records {
            mc.write_record(metrics_row(r))?;
            serde_json::to_writer(&mut mj, r)?;
            mj.write_all(b"\n")?;
        }
        for p in probes {
            pc.serialize(p)?;
        }
        for a in audit {
            serde_json::to_writer(&mut au, a)?;
            au.write_all(b"\n")?;
        }
        mc.flush()?;
        mj.flush()?;
        pc.flush()?;
        au.flush()?;
        (self.metrics_csv, self.metrics_jsonl, self.probes_csv, self.audit) = (Some(mc), Some(mj), Some(pc), Some(au));
        Ok(())
    }

    /// Drops stream entries written after learner step `step` (an interrupted
    /// run may have logged past its last checkpoint) and returns the rest.
    pub fn truncate_to(&mut self, step: u64) -> Result<(Vec<MetricsRecord>, Vec<ProbeRecord>, Vec<AuditRecord>)> {
        let records: Vec<MetricsRecord> = read_metrics(&self.path)?.into_iter().filter(|r| r.step <= step).collect();
        let probes: Vec<ProbeRecord> = read_probes(&self.path)?.into_iter().filter(|p| p.step < step).collect();
        let audit: Vec<AuditRecord> = read_audit(&self.path)?.into_iter().filter(|a| a.step < step).collect();
        self.reset_streams(&records, &probes, &audit)?;
        self.summary.steps_done = step;
        self.write_summary()?;
        Ok((records, probes, audit))
    }

    pub fn append(&mut self, rec: &MetricsRecord, probe: Option<&ProbeRecord>, audit: &[AuditRecord]) -> Result<()> {
        let (Some(mc), Some(mj), Some(pc), Some(au)) = (&mut self.metrics_csv, &mut self.metrics_jsonl, &mut self.probes_csv, &mut self.audit)
        else {
            return Err(Error::Config("run streams are not open".into()));
        };
        mc.write_record(metrics_row(rec))?;
        mc.flush()?;
        serde_json::to_writer(&mut *mj, rec)?;
        mj.write_all(b"\n")?;
        mj.flush()?;
        if let Some(p) = probe {
            pc.serialize(p)?;
            pc.flush()?;
        }
        for a in audit {
            serde_json::to_writer(&mut *au, a)?;
            au.write_all(b"\n")?;
        }
        au.flush()?;
        self.summary.steps_done = rec.step;
        Ok(())
    }

    pub fn write_final_eval(&mut self, e: &EvalMetrics) -> Result<()> {
        fs::write(self.path.join("final_eval.json"), serde_json::to_vec_pretty(e)?)?;
        self.summary.final_eval = Some(e.clone());
        Ok(())
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.path.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn save_checkpoint<T: Scalar>(&self, ck: &Checkpoint<T>, name: &str) -> Result<()> {
        ck.save(&self.checkpoint_path(name))?;
        self.write_summary()
    }

    pub fn load_checkpoint<T: Scalar>(&self) -> Result<Option<Checkpoint<T>>> {
        let p = self.checkpoint_path("latest");
        if p.exists() {
            Ok(Some(Checkpoint::load(&p)?))
        } else {
            Ok(None)
        }
    }

    pub fn finish(&mut self, out: &TrainOutput) -> Result<()> {
        self.summary.status = if out.finished { RunStatus::Done } else { RunStatus::Pending };
        self.summary.theta_checksum = Some(out.theta_checksum.clone());
        self.summary.phi_checksum = Some(out.phi_checksum.clone());
        self.summary.designer_updates = out.designer_updates;
        if let Some(e) = &out.final_eval {
            self.summary.final_eval = Some(e.clone());
        }
        self.write_summary()
    }

    pub fn fail(&mut self) -> Result<()> {
        self.summary.status = RunStatus::Failed;
        self.write_summary()
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join("lock"));
    }
}
