//! Language runner: packed-row next-token pretraining with designer, fixed
//! smoothing or one-hot targets, and answer-span feedback.

use std::cell::Cell;
use std::time::Instant;

use rand::Rng;
use vbpt_autodiff::{GradVector, Graph, Scalar, Tensor};

use super::{AuditRecord, BatchRole, EvalMetrics, ProbeRecord, Rngs, Runner, StepResult};
use crate::checkpoint::{store_like, Checkpoint};
use crate::config::{LanguageRun, Method, RunConfig};
use crate::data::language::LanguageTask;
use crate::data::text::TextExample;
use crate::designer::{designer_targets, init_designer, DesignerConfig};
use crate::error::{Error, Result};
use crate::eval::{self, labeled_batch};
use crate::lm::{init_lm, lm_forward, LmConfig, TokenBatch};
use crate::optim::Adam;
use crate::params::{Bound, ParamStore};
use crate::rng::{self, RngState};
use crate::targets::{fixed_soft_targets, loss_rows, one_hot_targets, pretrain_loss, pretrain_loss_const, CandidateTargets, LossRows};
use crate::value::{
    down_gradient, meta_gradient, pre_gradient, random_feedback_vector, value_report, FeedbackWeights, LanguageDownstream, ParamSubset, Pretrain,
    PretrainLoss,
};

const STREAMS: &[&str] = &["batch", "feedback", "probe", "random"];

/// Fixed soft targets of the smoothing arms for one batch.
pub fn baseline_targets<T: Scalar>(method: Method, logits: &Tensor<T>, rows: &LossRows, k: usize, alpha: f64) -> Result<CandidateTargets<T>> {
    match method {
        Method::UniformSmoothing => fixed_soft_targets(logits, rows, k, alpha, false),
        Method::SelfDistillation => fixed_soft_targets(logits, rows, k, alpha, true),
        m => Err(Error::Config(format!("method {} has no fixed targets", m.name()))),
    }
}

/// Pretraining objective of one batch under the configured method. Records
/// the mean designer gate of its last evaluation.
struct Objective<'a> {
    method: Method,
    lm: &'a LmConfig,
    designer: &'a DesignerConfig,
    alpha: f64,
    batch: &'a TokenBatch,
    rows: &'a LossRows,
    mean_gate: Cell<Option<f64>>,
}

impl<T: Scalar> Pretrain<T> for Objective<'_> {
    fn loss(&self, g: &Graph<T>, theta: &Bound<T>, phi: &Bound<T>) -> Result<PretrainLoss<T>> {
        let out = lm_forward(self.lm, g, theta, self.batch)?;
        let loss = match self.method {
            Method::BaselineNtp => pretrain_loss_const(g, &out.logits, self.rows, one_hot_targets(self.rows, self.lm.vocab))?,
            Method::Value | Method::RandomFeedback => {
                let d = designer_targets(self.designer, g, phi, self.batch, self.rows, &out.logits.value())?;
                let a = d.alpha.value();
                self.mean_gate.set(Some(a.data().iter().map(|x| x.as_f64()).sum::<f64>() / a.numel() as f64));
                pretrain_loss(&out.logits, self.rows, &d.q_full(self.lm.vocab)?)?
            }
            m => {
                let t = baseline_targets(m, &out.logits.value(), self.rows, self.designer.top_k, self.alpha)?;
                pretrain_loss_const(g, &out.logits, self.rows, t.full(self.lm.vocab)?)?
            }
        };
        Ok(PretrainLoss { loss, regularizer: None })
    }
}

struct Batch {
    tokens: TokenBatch,
    rows: LossRows,
    ids: Vec<u64>,
}

pub struct LanguageRunner<'a, T: Scalar> {
    cfg: &'a RunConfig,
    run: &'a LanguageRun,
    task: &'a LanguageTask,
    subset: ParamSubset,
    weights: FeedbackWeights,
    theta: ParamStore<T>,
    phi: ParamStore<T>,
    learner: Adam<T>,
    designer: Adam<T>,
    rngs: Rngs,
    heldout: Vec<TextExample>,
}

impl<'a, T: Scalar> LanguageRunner<'a, T> {
    pub fn new(cfg: &'a RunConfig, run: &'a LanguageRun, task: &'a LanguageTask) -> Result<Self> {
        if task.spec.seq_len > run.model.max_seq {
            return Err(Error::LengthOverflow { len: task.spec.seq_len, max: run.model.max_seq });
        }
        if task.rows.is_empty() || task.feedback.examples.is_empty() {
            return Err(Error::Empty("language task splits"));
        }
        let theta: ParamStore<T> = init_lm(&run.model, &mut rng::stream(cfg.seed, "init.learner"));
        let phi: ParamStore<T> = if cfg.method.has_meta_steps() {
            init_designer(&run.designer, &mut rng::stream(cfg.seed, "init.designer"))
        } else {
            ParamStore::new()
        };
        let subset = cfg.subset();
        subset.split(&theta.layout())?;
        let n = run.eval.n_heldout.unwrap_or(task.heldout.examples.len()).min(task.heldout.examples.len());
        Ok(LanguageRunner {
            cfg,
            run,
            task,
            subset,
            weights: cfg.feedback_weights(),
            learner: Adam::new(cfg.learner_optim.clone(), theta.numel(), cfg.steps),
            designer: Adam::new(cfg.designer_optim.clone(), phi.numel(), cfg.steps),
            theta,
            phi,
            rngs: Rngs::new(cfg.seed, STREAMS),
            heldout: task.heldout.examples[..n].to_vec(),
        })
    }

    pub fn theta(&self) -> &ParamStore<T> {
        &self.theta
    }

    pub fn phi(&self) -> &ParamStore<T> {
        &self.phi
    }

    fn pretrain_batch(&mut self) -> Result<Batch> {
        let n = self.cfg.batch_size;
        let rows = &self.task.rows;
        let picks: Vec<usize> = (0..n).map(|_| self.rngs.get("batch").random_range(0..rows.len())).collect();
        let seq = self.task.spec.seq_len;
        let tokens = TokenBatch {
            tokens: picks.iter().flat_map(|&i| rows[i].tokens.iter().copied()).collect(),
            segments: picks.iter().flat_map(|&i| rows[i].segments.iter().copied()).collect(),
            batch: n,
            seq,
        };
        let mask: Vec<bool> = picks.iter().flat_map(|&i| rows[i].loss_mask.iter().copied()).collect();
        let ids = picks.iter().flat_map(|&i| rows[i].boundaries.iter().map(|b| b.example_id)).collect();
        Ok(Batch { rows: loss_rows(&tokens, &mask)?, tokens, ids })
    }

    fn labeled(&mut self, split: &'a [TextExample], n: usize, stream: &str) -> Result<Batch> {
        let picks: Vec<&TextExample> = (0..n).map(|_| &split[self.rngs.get(stream).random_range(0..split.len())]).collect();
        let (tokens, rows) = labeled_batch(&picks, self.task.spec.seq_len)?;
        Ok(Batch { tokens, rows, ids: picks.iter().map(|e| e.id).collect() })
    }

    fn objective<'b>(&'b self, b: &'b Batch) -> Objective<'b> {
        Objective {
            method: self.cfg.method,
            lm: &self.run.model,
            designer: &self.run.designer,
            alpha: self.run.smoothing_alpha(),
            batch: &b.tokens,
            rows: &b.rows,
            mean_gate: Cell::new(None),
        }
    }

    fn down_grad(&self, b: &Batch) -> Result<GradVector<T>> {
        let down = LanguageDownstream { lm: &self.run.model, batch: &b.tokens, rows: &b.rows };
        down_gradient(&down, &self.theta, &self.weights)
    }

    fn down_loss(&self, theta: &ParamStore<T>, b: &Batch) -> Result<f64> {
        let g = Graph::new();
        let _ng = g.no_grad();
        let tb = theta.bind(&g, false);
        Ok(eval::language_downstream_loss(&self.run.model, &g, &tb, &b.tokens, &b.rows)?.item().as_f64())
    }
}

impl<T: Scalar> Runner<T> for LanguageRunner<'_, T> {
    fn step(&mut self, step: u64, meta: bool, probe: bool) -> Result<StepResult> {
        let mut out = StepResult::default();
        let mut micro = Vec::with_capacity(self.cfg.grad_accum);
        let mut g_pre: Option<GradVector<T>> = None;
        let mut l_sum = 0.0;
        for _ in 0..self.cfg.grad_accum {
            let b = self.pretrain_batch()?;
            let (l, g) = pre_gradient(&self.objective(&b), &self.theta, &self.phi)?;
            l_sum += l.as_f64();
            g_pre = Some(match g_pre {
                Some(acc) => acc.add(&g)?,
                None => g,
            });
            out.audit.push(AuditRecord { step, role: BatchRole::Pretrain, ids: b.ids.clone() });
            micro.push(b);
        }
        let mut g_pre = g_pre.expect("grad_accum >= 1");
        if self.cfg.grad_accum > 1 {
            g_pre = g_pre.scale(T::of(1.0 / self.cfg.grad_accum as f64));
        }
        out.l_pre = l_sum / self.cfg.grad_accum as f64;
        let eta = self.learner.lr();

        if meta {
            let t0 = Instant::now();
            let fb = self.labeled(&self.task.feedback.examples, self.cfg.feedback_batch, "feedback")?;
            let g_down = self.down_grad(&fb)?;
            let pre_ids: Vec<u64> = micro.iter().flat_map(|b| b.ids.iter().copied()).collect();
            let unbiased = pre_ids.iter().all(|i| !fb.ids.contains(i));
            let report = value_report(&g_pre, &g_down, &self.subset, eta, pre_ids, fb.ids.clone(), unbiased)?;
            let (s_layout, _) = self.subset.split(g_down.layout())?;
            let mut signal = g_down.restrict(&s_layout)?;
            if self.cfg.method == Method::RandomFeedback {
                signal = random_feedback_vector(&s_layout, report.g_down_norm_s, self.rngs.get("random"));
            }
            let obj = self.objective(&micro[0]);
            let mg = meta_gradient(&obj, &self.theta, &self.phi, &self.subset, &signal)?;
            out.designer_stat = obj.mean_gate.get();
            self.designer.update(&mut self.phi, &mg.grad)?;
            out.meta_loss = Some(mg.loss);
            out.value = Some(report);
            out.audit.push(AuditRecord { step, role: BatchRole::Feedback, ids: fb.ids });
            out.value_time = t0.elapsed().as_secs_f64();
        }

        if probe {
            let t0 = Instant::now();
            let pc = self.cfg.probe.clone().expect("probe configured");
            let pb = self.labeled(&self.task.probe.examples, pc.batch, "probe")?;
            let g_down = self.down_grad(&pb)?;
            let predicted = pc.eta * g_down.dot(&g_pre)?.as_f64();
            let mut plus = self.theta.clone();
            plus.axpy(T::of(-pc.eta), &g_pre)?;
            let realized = self.down_loss(&self.theta, &pb)? - self.down_loss(&plus, &pb)?;
            out.probe = Some(ProbeRecord { step, predicted, realized });
            out.audit.push(AuditRecord { step, role: BatchRole::Probe, ids: pb.ids });
            out.probe_time = t0.elapsed().as_secs_f64();
        }

        let stats = self.learner.update(&mut self.theta, &g_pre)?;
        out.lr = stats.lr;
        out.grad_norm = stats.grad_norm;
        Ok(out)
    }

    fn evaluate(&mut self, final_eval: bool) -> Result<EvalMetrics> {
        let primary = eval::pass_at_1(&self.run.model, &self.theta, &self.heldout)?;
        let pass_k = if final_eval && !self.run.eval.pass_k.is_empty() {
            let e = &self.run.eval;
            eval::pass_at_k(&self.run.model, &self.theta, &self.heldout, &e.pass_k, e.pool, e.temperature, self.cfg.seed)?
        } else {
            Vec::new()
        };
        Ok(EvalMetrics { primary, secondary: None, pass_k })
    }

    fn snapshot(&self) -> Result<(Checkpoint<T>, serde_json::Value)> {
        let ck = Checkpoint::new(serde_json::Value::Null)
            .with("theta", self.theta.clone())
            .with("phi", self.phi.clone())
            .with("learner.m", store_like(&self.theta, &self.learner.m)?)
            .with("learner.v", store_like(&self.theta, &self.learner.v)?)
            .with("designer.m", store_like(&self.phi, &self.designer.m)?)
            .with("designer.v", store_like(&self.phi, &self.designer.v)?);
        let meta = serde_json::json!({
            "learner_step": self.learner.step,
            "designer_step": self.designer.step,
            "rngs": self.rngs.capture(),
        });
        Ok((ck, meta))
    }

    fn restore(&mut self, ck: &Checkpoint<T>, meta: &serde_json::Value) -> Result<()> {
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")));
        self.theta = ck.group("theta")?.clone();
        self.phi = ck.group("phi")?.clone();
        self.learner.m = ck.group("learner.m")?.to_flat();
        self.learner.v = ck.group("learner.v")?.to_flat();
        self.designer.m = ck.group("designer.m")?.to_flat();
        self.designer.v = ck.group("designer.v")?.to_flat();
        self.learner.step = serde_json::from_value(field("learner_step")?)?;
        self.designer.step = serde_json::from_value(field("designer_step")?)?;
        let states: std::collections::BTreeMap<String, RngState> = serde_json::from_value(field("rngs")?)?;
        self.rngs = Rngs::restore(&states)?;
        Ok(())
    }

    fn theta_checksum(&self) -> String {
        self.theta.checksum()
    }

    fn phi_checksum(&self) -> String {
        self.phi.checksum()
    }

    fn designer_updates(&self) -> u64 {
        self.designer.step
    }
}
