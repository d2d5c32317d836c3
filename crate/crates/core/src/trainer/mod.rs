//! The interleaved training loop: learner steps on the pretraining loss and,
//! every `meta_period` steps after burn-in, a designer step that increases
//! the alignment value.

mod language;
mod run_dir;
pub mod sweep;
mod vision;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vbpt_autodiff::Scalar;

use crate::checkpoint::Checkpoint;
use crate::config::{Precision, RunConfig, TaskConfig};
use crate::data::images::{gen_dense_images, load_image_task, DenseImageTask};
use crate::data::language::{gen_language_task, load_language_task, LanguageTask};
use crate::error::{Error, Result};
use crate::rng::{self, RngState};
use crate::value::ValueReport;

pub use language::{baseline_targets, LanguageRunner};
pub use run_dir::{read_audit, read_metrics, read_probes, RunDir, RunStatus, RunSummary, METRICS_COLUMNS, METRICS_VERSION};
pub use vision::{fit_heads, refresh_eval_heads, VisionRunner};

/// Task data for one run.
pub enum TaskData {
    Language(LanguageTask),
    Vision(DenseImageTask),
}

impl TaskData {
    /// Loads from `cfg.data_dir` when set, otherwise regenerates from the spec.
    pub fn for_config(cfg: &RunConfig) -> Result<Self> {
        match (&cfg.task, &cfg.data_dir) {
            (TaskConfig::Language(l), None) => Ok(TaskData::Language(gen_language_task(&l.data)?)),
            (TaskConfig::Vision(v), None) => Ok(TaskData::Vision(gen_dense_images(&v.data)?)),
            (TaskConfig::Language(l), Some(d)) => {
                let task = load_language_task(d)?;
                same_spec(&task.spec, &l.data, d)?;
                Ok(TaskData::Language(task))
            }
            (TaskConfig::Vision(v), Some(d)) => {
                let task = load_image_task(d)?;
                same_spec(&task.spec, &v.data, d)?;
                Ok(TaskData::Vision(task))
            }
        }
    }
}

fn same_spec<S: PartialEq>(stored: &S, wanted: &S, dir: &Path) -> Result<()> {
    if stored == wanted {
        Ok(())
    } else {
        Err(Error::Config(format!("{} was generated from a different data spec than the config's", dir.display())))
    }
}

/// One learner step's record. Timing fields are wall-clock seconds and are
/// the only fields that differ between identical runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Learner steps completed.
    pub step: u64,
    /// Unlabeled tokens processed: steps × batch × seq × grad_accum.
    pub tokens: u64,
    pub l_pre: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub meta_step: bool,
    pub v: Option<f64>,
    pub predicted_improvement: Option<f64>,
    pub meta_loss: Option<f64>,
    /// Mean gate (language) or mean mask value (images) in the meta step.
    pub designer_stat: Option<f64>,
    /// Pass@1 (language) or mIoU (images).
    pub eval: Option<f64>,
    /// RMSE (images).
    pub eval_secondary: Option<f64>,
    pub best_so_far: Option<f64>,
    pub step_time: f64,
    pub value_time: f64,
    /// Full alignment report of the meta step.
    pub value: Option<ValueReport>,
}

impl MetricsRecord {
    /// Copy with the wall-clock fields cleared, for determinism checks.
    pub fn untimed(&self) -> MetricsRecord {
        MetricsRecord { step_time: 0.0, value_time: 0.0, ..self.clone() }
    }
}

/// Predicted versus realized one-step downstream improvement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub step: u64,
    pub predicted: f64,
    pub realized: f64,
}

/// Which split a batch was drawn from and what it fed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchRole {
    /// Unlabeled batch of a learner update.
    Pretrain,
    /// Labeled batch for the downstream gradient.
    Feedback,
    /// Labeled batch for evaluator-head refresh.
    Heads,
    Probe,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub step: u64,
    pub role: BatchRole,
    pub ids: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub primary: f64,
    pub secondary: Option<f64>,
    pub pass_k: Vec<(usize, f64)>,
}

/// What a runner reports for one learner step.
#[derive(Default)]
pub(crate) struct StepResult {
    pub l_pre: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub value: Option<ValueReport>,
    pub meta_loss: Option<f64>,
    pub designer_stat: Option<f64>,
    pub value_time: f64,
    pub probe: Option<ProbeRecord>,
    pub probe_time: f64,
    pub audit: Vec<AuditRecord>,
}

/// Per-purpose random streams of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Rngs(pub BTreeMap<String, ChaCha8Rng>);

impl Rngs {
    pub fn new(seed: u64, purposes: &[&str]) -> Self {
        Rngs(purposes.iter().map(|p| (p.to_string(), rng::stream(seed, p))).collect())
    }

    pub fn get(&mut self, purpose: &str) -> &mut ChaCha8Rng {
        self.0.get_mut(purpose).expect("registered stream")
    }

    pub fn capture(&self) -> BTreeMap<String, RngState> {
        self.0.iter().map(|(k, r)| (k.clone(), RngState::capture(r))).collect()
    }

    pub fn restore(states: &BTreeMap<String, RngState>) -> Result<Self> {
        states
            .iter()
            .map(|(k, s)| s.restore().map(|r| (k.clone(), r)).ok_or_else(|| Error::Checkpoint(format!("bad rng state `{k}`"))))
            .collect::<Result<_>>()
            .map(Rngs)
    }
}

pub(crate) trait Runner<T: Scalar> {
    fn step(&mut self, step: u64, meta: bool, probe: bool) -> Result<StepResult>;
    fn evaluate(&mut self, final_eval: bool) -> Result<EvalMetrics>;
    /// Tensor groups and runner-specific metadata.
    fn snapshot(&self) -> Result<(Checkpoint<T>, serde_json::Value)>;
    fn restore(&mut self, ck: &Checkpoint<T>, meta: &serde_json::Value) -> Result<()>;
    fn theta_checksum(&self) -> String;
    fn phi_checksum(&self) -> String;
    fn designer_updates(&self) -> u64;
}

/// Stops a run early, as if interrupted, after writing a checkpoint.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub stop_after: Option<u64>,
    pub resume: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutput {
    pub records: Vec<MetricsRecord>,
    pub probes: Vec<ProbeRecord>,
    pub audit: Vec<AuditRecord>,
    /// Metrics of the last evaluation, when the run finished.
    pub final_eval: Option<EvalMetrics>,
    pub finished: bool,
    pub theta_checksum: String,
    pub phi_checksum: String,
    pub designer_updates: u64,
}

/// SHA-256 of the canonical TOML rendering of the config.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(cfg.to_toml()?.as_bytes())))
}

/// Whether 0-based step `s` carries a designer update.
pub fn is_meta_step(cfg: &RunConfig, s: u64) -> bool {
    let b = cfg.burn_in();
    cfg.method.has_meta_steps() && s >= b && (s - b).is_multiple_of(cfg.meta_period)
}

/// Runs (or resumes) training; writes artifacts to `dir` when given.
pub fn train(cfg: &RunConfig, data: &TaskData, dir: Option<&Path>, opts: &TrainOptions) -> Result<TrainOutput> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F64 => train_as::<f64>(cfg, data, dir, opts),
        Precision::F32 => train_as::<f32>(cfg, data, dir, opts),
    }
}

fn train_as<T: Scalar>(cfg: &RunConfig, data: &TaskData, dir: Option<&Path>, opts: &TrainOptions) -> Result<TrainOutput> {
    match (&cfg.task, data) {
        (TaskConfig::Language(l), TaskData::Language(task)) => {
            let mut r = LanguageRunner::<T>::new(cfg, l, task)?;
            drive(cfg, &mut r, dir, opts)
        }
        (TaskConfig::Vision(v), TaskData::Vision(task)) => {
            let mut r = VisionRunner::<T>::new(cfg, v, task)?;
            drive(cfg, &mut r, dir, opts)
        }
        _ => Err(Error::Config("task data does not match the configured task".into())),
    }
}

#[derive(Serialize, Deserialize)]
struct LoopMeta {
    step: u64,
    best: Option<f64>,
    config_hash: String,
    runner: serde_json::Value,
}

fn drive<T: Scalar>(cfg: &RunConfig, runner: &mut dyn Runner<T>, dir: Option<&Path>, opts: &TrainOptions) -> Result<TrainOutput> {
    let hash = config_hash(cfg)?;
    let mut out_dir = match dir {
        Some(d) => Some(RunDir::open(d, cfg, &hash, opts.resume)?),
        None => None,
    };
    let out = run_loop(cfg, runner, &mut out_dir, opts, &hash);
    if let (Err(_), Some(d)) = (&out, &mut out_dir) {
        d.fail()?;
    }
    out
}

fn run_loop<T: Scalar>(
    cfg: &RunConfig,
    runner: &mut dyn Runner<T>,
    out_dir: &mut Option<RunDir>,
    opts: &TrainOptions,
    hash: &str,
) -> Result<TrainOutput> {
    let hash = hash.to_string();
    let mut records = Vec::new();
    let mut probes = Vec::new();
    let mut audit = Vec::new();
    let mut start = 0;
    let mut best: Option<f64> = None;

    if opts.resume {
        let d = out_dir.as_mut().ok_or_else(|| Error::Config("resume needs a run directory".into()))?;
        if let Some(ck) = d.load_checkpoint::<T>()? {
            let meta: LoopMeta = serde_json::from_value(ck.meta.clone())?;
            if meta.config_hash != hash {
                return Err(Error::Checkpoint("checkpoint was written under a different config".into()));
            }
            runner.restore(&ck, &meta.runner)?;
            start = meta.step;
            best = meta.best;
            (records, probes, audit) = d.truncate_to(start)?;
            log::info!("resuming at step {start}");
        }
    }

    let total = cfg.steps;
    let tokens_per_step = cfg.tokens_per_step();
    let mut finished = true;
    let mut last_eval = None;
    for s in start..total {
        let meta = is_meta_step(cfg, s);
        let probe = cfg.probe.as_ref().is_some_and(|p| s % p.every == 0);
        let t0 = Instant::now();
        let r = match runner.step(s, meta, probe) {
            Ok(r) if r.l_pre.is_finite() => r,
            Ok(_) => return Err(dump_divergence(runner, out_dir, s, best, &hash, "pretraining loss".into())?),
            Err(e @ (Error::Divergence { .. } | Error::Autodiff(vbpt_autodiff::Error::NonFinite { .. }))) => {
                return Err(dump_divergence(runner, out_dir, s, best, &hash, e.to_string())?)
            }
            Err(e) => return Err(e),
        };
        let step_time = t0.elapsed().as_secs_f64() - r.probe_time;
        let done = s + 1;
        let eval_now = done == total || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        let ev = if eval_now { Some(runner.evaluate(done == total)?) } else { None };
        if let Some(e) = &ev {
            best = Some(best.map_or(e.primary, |b: f64| b.max(e.primary)));
        }
        let rec = MetricsRecord {
            step: done,
            tokens: done * tokens_per_step,
            l_pre: r.l_pre,
            lr: r.lr,
            grad_norm: r.grad_norm,
            meta_step: meta,
            v: r.value.as_ref().map(|v| v.v),
            predicted_improvement: r.value.as_ref().map(|v| v.predicted_improvement),
            meta_loss: r.meta_loss,
            designer_stat: r.designer_stat,
            eval: ev.as_ref().map(|e| e.primary),
            eval_secondary: ev.as_ref().and_then(|e| e.secondary),
            best_so_far: if ev.is_some() { best } else { None },
            step_time,
            value_time: r.value_time,
            value: r.value,
        };
        if let Some(d) = out_dir.as_mut() {
            d.append(&rec, r.probe.as_ref(), &r.audit)?;
            if done == total {
                if let Some(e) = &ev {
                    d.write_final_eval(e)?;
                }
            }
        }
        if done == total {
            last_eval = ev.clone();
        }
        records.push(rec);
        probes.extend(r.probe);
        audit.extend(r.audit);
        let stop = opts.stop_after == Some(done) && done < total;
        let periodic = cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0;
        if let Some(d) = out_dir.as_ref() {
            if stop || periodic || done == total {
                let (ck, m) = runner.snapshot()?;
                d.save_checkpoint(&with_meta(ck, done, best, &hash, m)?, "latest")?;
            }
        }
        if stop {
            finished = false;
            break;
        }
    }
    let final_eval = match (out_dir.as_ref(), finished, last_eval) {
        (_, false, _) => None,
        (_, true, Some(e)) => Some(e),
        (Some(d), true, None) => RunSummary::load(d.path())?.final_eval,
        (None, true, None) => None,
    };
    let out = TrainOutput {
        records,
        probes,
        audit,
        final_eval,
        finished,
        theta_checksum: runner.theta_checksum(),
        phi_checksum: runner.phi_checksum(),
        designer_updates: runner.designer_updates(),
    };
    if let Some(d) = out_dir.as_mut() {
        d.finish(&out)?;
    }
    Ok(out)
}

/// Writes the pre-step state of a diverged run to `diverged.ckpt`; returns
/// the error to report.
fn dump_divergence<T: Scalar>(
    runner: &dyn Runner<T>,
    out_dir: &Option<RunDir>,
    step: u64,
    best: Option<f64>,
    hash: &str,
    what: String,
) -> Result<Error> {
    if let Some(d) = out_dir {
        let (ck, m) = runner.snapshot()?;
        d.save_checkpoint(&with_meta(ck, step, best, hash, m)?, "diverged")?;
    }
    log::error!("non-finite {what} at step {step}");
    Ok(Error::Divergence { what, step })
}

fn with_meta<T: Scalar>(mut ck: Checkpoint<T>, step: u64, best: Option<f64>, hash: &str, runner: serde_json::Value) -> Result<Checkpoint<T>> {
    ck.meta = serde_json::to_value(LoopMeta { step, best, config_hash: hash.to_string(), runner })?;
    Ok(ck)
}

/// Every pretraining batch id is outside the labeled id set.
pub fn check_label_firewall(audit: &[AuditRecord], labeled: &std::collections::HashSet<u64>) -> Result<()> {
    for a in audit.iter().filter(|a| a.role == BatchRole::Pretrain) {
        if let Some(id) = a.ids.iter().find(|i| labeled.contains(i)) {
            return Err(Error::Config(format!("labeled example {id} entered a learner update at step {}", a.step)));
        }
    }
    Ok(())
}
