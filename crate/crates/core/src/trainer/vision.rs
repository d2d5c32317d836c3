//! Vision runner: masked latent prediction against a periodically refreshed
//! target encoder, with designer or random patch masks, and dense-prediction
//! feedback through evaluator heads on frozen features.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vbpt_autodiff::{GradVector, Graph, Scalar, Tensor};

use super::{AuditRecord, BatchRole, EvalMetrics, Rngs, Runner, StepResult};
use crate::checkpoint::{store_like, Checkpoint};
use crate::config::{HeadTraining, Method, RunConfig, VisionRun};
use crate::data::images::{image_tensor, DenseImage, DenseImageTask};
use crate::error::{Error, Result};
use crate::eval::{dense_losses, evaluate_dense, frozen_features, patch_labels};
use crate::mask_designer::{designer_mask, init_mask_designer, random_patch_masks};
use crate::optim::{Adam, AdamConfig};
use crate::params::{Bound, ParamStore};
use crate::rng::{self, RngState};
use crate::value::{
    down_gradient, meta_gradient, pre_gradient, random_feedback_vector, value_report, FeedbackWeights, ParamSubset, Pretrain, PretrainLoss,
    VisionDownstream, VisionPretrain,
};
use crate::vision::{init_heads, init_vision, ssl_loss, target_features, VisionConfig};

const STREAMS: &[&str] = &["batch", "feedback", "heads", "masks", "random"];

/// Latent prediction under fixed masks; no designer involved.
struct FixedMaskPretrain<'a, T: Scalar> {
    cfg: &'a VisionConfig,
    images: &'a Tensor<T>,
    target: &'a Tensor<T>,
    mask: Tensor<T>,
}

impl<T: Scalar> Pretrain<T> for FixedMaskPretrain<'_, T> {
    fn loss(&self, g: &Graph<T>, theta: &Bound<T>, _phi: &Bound<T>) -> Result<PretrainLoss<T>> {
        let x = g.constant(self.images.clone());
        let m = g.constant(self.mask.clone());
        Ok(PretrainLoss { loss: ssl_loss(self.cfg, g, theta, &x, &m, self.target)?, regularizer: None })
    }
}

/// Trains `heads` on frozen backbone features of `images` with a fresh
/// optimizer; returns the loss (segmentation + depth) of every step.
pub fn fit_heads<T: Scalar>(
    cfg: &VisionConfig,
    theta: &ParamStore<T>,
    heads: &mut ParamStore<T>,
    images: &[DenseImage],
    training: &HeadTraining,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if training.steps == 0 {
        return Ok(Vec::new());
    }
    if images.is_empty() {
        return Err(Error::Empty("head training images"));
    }
    let all: Vec<&DenseImage> = images.iter().collect();
    let feats = frozen_features(cfg, theta, &all)?;
    let np = cfg.n_patches();
    let opt_cfg = AdamConfig { lr: training.lr, ..AdamConfig::designer() };
    let mut opt = Adam::new(opt_cfg, heads.numel(), training.steps as u64);
    let mut losses = Vec::with_capacity(training.steps);
    for _ in 0..training.steps {
        let picks: Vec<usize> = (0..training.batch).map(|_| rng.random_range(0..images.len())).collect();
        let rows: Vec<usize> = picks.iter().flat_map(|&i| i * np..(i + 1) * np).collect();
        let batch: Vec<&DenseImage> = picks.iter().map(|&i| &images[i]).collect();
        let (cls, dep) = patch_labels(cfg, &batch);
        let g = Graph::new();
        let hb = heads.bind(&g, true);
        let f = g.constant(feats.gather_rows(&rows)?);
        let l = dense_losses(cfg, &g, &hb, &f, &cls, &dep)?;
        let total = l.seg.add(&l.depth)?;
        let grad = g.backward(&total, &hb.param_set(), false)?;
        losses.push(total.item().as_f64());
        opt.update(heads, &grad)?;
    }
    Ok(losses)
}

/// [`fit_heads`] with the backbone checked unchanged afterwards.
pub fn refresh_eval_heads<T: Scalar>(
    cfg: &VisionConfig,
    theta: &ParamStore<T>,
    heads: &mut ParamStore<T>,
    images: &[DenseImage],
    training: &HeadTraining,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let before = theta.checksum();
    let losses = fit_heads(cfg, theta, heads, images, training, rng)?;
    assert_eq!(before, theta.checksum(), "backbone changed during head refresh");
    Ok(losses)
}

struct Batch<T: Scalar> {
    images: Tensor<T>,
    target: Tensor<T>,
    ids: Vec<u64>,
}

pub struct VisionRunner<'a, T: Scalar> {
    cfg: &'a RunConfig,
    run: &'a VisionRun,
    task: &'a DenseImageTask,
    subset: ParamSubset,
    weights: FeedbackWeights,
    theta: ParamStore<T>,
    target: ParamStore<T>,
    phi: ParamStore<T>,
    heads: ParamStore<T>,
    learner: Adam<T>,
    designer: Adam<T>,
    rngs: Rngs,
}

impl<'a, T: Scalar> VisionRunner<'a, T> {
    pub fn new(cfg: &'a RunConfig, run: &'a VisionRun, task: &'a DenseImageTask) -> Result<Self> {
        if task.unlabeled.is_empty() || task.train_head.is_empty() || task.meta.is_empty() || task.eval.is_empty() {
            return Err(Error::Empty("image task splits"));
        }
        if task.spec.height != run.model.height || task.spec.width != run.model.width {
            return Err(Error::Shape("image data and model disagree on geometry".into()));
        }
        let theta: ParamStore<T> = init_vision(&run.model, &mut rng::stream(cfg.seed, "init.learner"));
        let phi: ParamStore<T> = if cfg.method.has_meta_steps() {
            init_mask_designer(&run.mask, &run.model, &mut rng::stream(cfg.seed, "init.designer"))
        } else {
            ParamStore::new()
        };
        let heads = init_heads(&run.model, &mut rng::stream(cfg.seed, "init.heads"));
        let subset = cfg.subset();
        subset.split(&theta.layout())?;
        Ok(VisionRunner {
            cfg,
            run,
            task,
            subset,
            weights: cfg.feedback_weights(),
            learner: Adam::new(cfg.learner_optim.clone(), theta.numel(), cfg.steps),
            designer: Adam::new(cfg.designer_optim.clone(), phi.numel(), cfg.steps),
            target: theta.clone(),
            theta,
            phi,
            heads,
            rngs: Rngs::new(cfg.seed, STREAMS),
        })
    }

    pub fn theta(&self) -> &ParamStore<T> {
        &self.theta
    }

    pub fn phi(&self) -> &ParamStore<T> {
        &self.phi
    }

    fn pretrain_batch(&mut self) -> Result<Batch<T>> {
        let split = &self.task.unlabeled;
        let picks: Vec<&DenseImage> = (0..self.cfg.batch_size).map(|_| &split[self.rngs.get("batch").random_range(0..split.len())]).collect();
        let images = image_tensor(&picks, self.run.model.height, self.run.model.width);
        let target = target_features(&self.run.model, &self.target, &images)?;
        Ok(Batch { images, target, ids: picks.iter().map(|im| im.index as u64).collect() })
    }

    fn designed<'b>(&'b self, b: &'b Batch<T>) -> VisionPretrain<'b, T> {
        VisionPretrain {
            cfg: &self.run.model,
            images: &b.images,
            target: &b.target,
            lambda_spars: self.run.lambda_spars,
            lambda_tv: self.run.lambda_tv,
            keep_ratio: self.run.keep_ratio,
        }
    }

    fn pre_grad(&mut self, b: &Batch<T>) -> Result<(f64, GradVector<T>)> {
        let (l, g) = if self.cfg.method.has_meta_steps() {
            pre_gradient(&self.designed(b), &self.theta, &self.phi)?
        } else {
            let mask = random_patch_masks(&self.run.model, self.cfg.batch_size, self.run.keep_ratio, self.rngs.get("masks"));
            let obj = FixedMaskPretrain { cfg: &self.run.model, images: &b.images, target: &b.target, mask };
            pre_gradient(&obj, &self.theta, &self.phi)?
        };
        Ok((l.as_f64(), g))
    }

    fn mean_mask(&self, images: &Tensor<T>) -> Result<f64> {
        let g = Graph::new();
        let _ng = g.no_grad();
        let pb = self.phi.bind(&g, false);
        let m = designer_mask(&self.run.model, &pb, &g.constant(images.clone()))?;
        Ok(m.mean()?.item().as_f64())
    }
}

impl<T: Scalar> Runner<T> for VisionRunner<'_, T> {
    fn step(&mut self, step: u64, meta: bool, _probe: bool) -> Result<StepResult> {
        if step.is_multiple_of(self.cfg.meta_period) {
            self.target = self.theta.clone();
        }
        let mut out = StepResult::default();
        let mut micro = Vec::with_capacity(self.cfg.grad_accum);
        let mut g_pre: Option<GradVector<T>> = None;
        let mut l_sum = 0.0;
        for _ in 0..self.cfg.grad_accum {
            let b = self.pretrain_batch()?;
            let (l, g) = self.pre_grad(&b)?;
            l_sum += l;
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
            let mut heads = self.heads.clone();
            refresh_eval_heads(&self.run.model, &self.theta, &mut heads, &self.task.train_head, &self.run.refresh, self.rngs.get("heads"))?;
            self.heads = heads;
            out.audit.push(AuditRecord { step, role: BatchRole::Heads, ids: self.task.train_head.iter().map(|im| im.index as u64).collect() });

            let split = &self.task.meta;
            let fb: Vec<&DenseImage> =
                (0..self.cfg.feedback_batch).map(|_| &split[self.rngs.get("feedback").random_range(0..split.len())]).collect();
            let fb_ids: Vec<u64> = fb.iter().map(|im| im.index as u64).collect();
            let down = VisionDownstream { cfg: &self.run.model, heads: &self.heads, images: &fb };
            let g_down = down_gradient(&down, &self.theta, &self.weights)?;
            let pre_ids: Vec<u64> = micro.iter().flat_map(|b| b.ids.iter().copied()).collect();
            let unbiased = pre_ids.iter().all(|i| !fb_ids.contains(i));
            let report = value_report(&g_pre, &g_down, &self.subset, eta, pre_ids, fb_ids.clone(), unbiased)?;
            let (s_layout, _) = self.subset.split(g_down.layout())?;
            let mut signal = g_down.restrict(&s_layout)?;
            if self.cfg.method == Method::RandomFeedback {
                signal = random_feedback_vector(&s_layout, report.g_down_norm_s, self.rngs.get("random"));
            }
            let mg = meta_gradient(&self.designed(&micro[0]), &self.theta, &self.phi, &self.subset, &signal)?;
            self.designer.update(&mut self.phi, &mg.grad)?;
            out.meta_loss = Some(mg.loss);
            out.designer_stat = Some(self.mean_mask(&micro[0].images)?);
            out.value = Some(report);
            out.audit.push(AuditRecord { step, role: BatchRole::Feedback, ids: fb_ids });
            out.value_time = t0.elapsed().as_secs_f64();
        }

        let stats = self.learner.update(&mut self.theta, &g_pre)?;
        out.lr = stats.lr;
        out.grad_norm = stats.grad_norm;
        Ok(out)
    }

    fn evaluate(&mut self, _final_eval: bool) -> Result<EvalMetrics> {
        let m = &self.run.model;
        let mut heads = init_heads(m, &mut rng::stream(self.cfg.seed, "eval.heads.init"));
        let mut r = rng::stream(self.cfg.seed, "eval.heads.batch");
        fit_heads(m, &self.theta, &mut heads, &self.task.train_head, &self.run.eval_heads, &mut r)?;
        let images: Vec<&DenseImage> = self.task.eval.iter().collect();
        let d = evaluate_dense(m, &self.theta, &heads, &images)?;
        Ok(EvalMetrics { primary: d.miou, secondary: Some(d.rmse), pass_k: Vec::new() })
    }

    fn snapshot(&self) -> Result<(Checkpoint<T>, serde_json::Value)> {
        let ck = Checkpoint::new(serde_json::Value::Null)
            .with("theta", self.theta.clone())
            .with("target", self.target.clone())
            .with("phi", self.phi.clone())
            .with("heads", self.heads.clone())
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
        self.target = ck.group("target")?.clone();
        self.phi = ck.group("phi")?.clone();
        self.heads = ck.group("heads")?.clone();
        self.learner.m = ck.group("learner.m")?.to_flat();
        self.learner.v = ck.group("learner.v")?.to_flat();
        self.designer.m = ck.group("designer.m")?.to_flat();
        self.designer.v = ck.group("designer.v")?.to_flat();
        self.learner.step = serde_json::from_value(field("learner_step")?)?;
        self.designer.step = serde_json::from_value(field("designer_step")?)?;
        let states: BTreeMap<String, RngState> = serde_json::from_value(field("rngs")?)?;
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
