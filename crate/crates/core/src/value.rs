//! Gradient alignment between pretraining and downstream objectives.
//!
//! `V = <g_down, g_pre>` restricted to a parameter subset `S`, and its
//! gradient in the designer parameters obtained by differentiating the
//! scalar `<g_down, g_pre(θ; φ)>` a second time.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use vbpt_autodiff::{GradOptions, GradVector, Graph, Layout, Scalar, Tensor, Var};

use crate::data::images::DenseImage;
use crate::designer::{designer_targets, DesignerConfig};
use crate::error::{Error, Result};
use crate::eval;
use crate::lm::{block_prefix, lm_forward, LmConfig, TokenBatch};
use crate::mask_designer::{designer_mask, sparsity_penalty, tv_penalty};
use crate::params::{Bound, ParamStore};
use crate::targets::{pretrain_loss, LossRows};
use crate::vision::{self, VisionConfig};

/// Named parameter groups entering the alignment dot product.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSubset {
    prefixes: Vec<String>,
}

impl ParamSubset {
    /// Parameters whose names start with one of `prefixes`.
    pub fn from_prefixes(prefixes: impl IntoIterator<Item = impl Into<String>>) -> Self {
        ParamSubset { prefixes: prefixes.into_iter().map(Into::into).collect() }
    }

    /// Every parameter.
    pub fn all() -> Self {
        Self::from_prefixes([""])
    }

    /// The last `k` blocks of an `n_layers`-deep model plus `head` groups.
    pub fn last_blocks(n_layers: usize, k: usize, head: &[&str]) -> Self {
        let mut p: Vec<String> = (n_layers.saturating_sub(k)..n_layers).map(block_prefix).collect();
        p.extend(head.iter().map(|h| h.to_string()));
        ParamSubset { prefixes: p }
    }

    /// Default for the language learner: last two blocks and the output head.
    pub fn lm_default(cfg: &LmConfig) -> Self {
        Self::last_blocks(cfg.n_layers, 2, &["head."])
    }

    /// Default for the vision learner: last two blocks, final norm and predictor.
    pub fn vision_default(cfg: &VisionConfig) -> Self {
        Self::last_blocks(cfg.n_layers, 2, &["enc.ln.", "pred."])
    }

    pub fn prefixes(&self) -> &[String] {
        &self.prefixes
    }

    pub fn contains(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// `(S, complement)` sub-layouts; errors when `S` selects nothing.
    pub fn split(&self, full: &Layout) -> Result<(Arc<Layout>, Arc<Layout>)> {
        let s = full.select(|n| self.contains(n));
        if s.entries().is_empty() {
            return Err(Error::Empty("parameter subset"));
        }
        Ok((s, full.select(|n| !self.contains(n))))
    }
}

/// Nonnegative per-evaluator weights on downstream gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackWeights(pub BTreeMap<String, f64>);

impl FeedbackWeights {
    pub fn single(name: &str) -> Self {
        FeedbackWeights(BTreeMap::from([(name.to_string(), 1.0)]))
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("feedback weights must be finite and nonnegative".into()));
        }
        if !self.0.values().any(|&w| w > 0.0) {
            return Err(Error::Config("at least one feedback weight must be positive".into()));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> f64 {
        self.0.get(name).copied().unwrap_or(0.0)
    }
}

/// Alignment of one pretraining gradient with one downstream gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueReport {
    pub v: f64,
    /// Alignment over every parameter, when both full gradients were at hand.
    pub v_full: Option<f64>,
    pub eta: f64,
    pub g_pre_norm_s: f64,
    pub g_down_norm_s: f64,
    pub omitted_bound: f64,
    pub predicted_improvement: f64,
    pub pre_batch: Vec<u64>,
    pub down_batch: Vec<u64>,
    /// The two batches were drawn independently.
    pub unbiased: bool,
}

impl ValueReport {
    /// `|V_full - V| <= omitted_bound`, up to rounding.
    pub fn bound_holds(&self) -> bool {
        match self.v_full {
            Some(full) => (full - self.v).abs() <= self.omitted_bound * (1.0 + 1e-12) + 1e-12 * full.abs().max(1.0),
            None => true,
        }
    }
}

/// Builds a report from two full-layout gradients.
pub fn value_report<T: Scalar>(
    g_pre: &GradVector<T>,
    g_down: &GradVector<T>,
    subset: &ParamSubset,
    eta: f64,
    pre_batch: Vec<u64>,
    down_batch: Vec<u64>,
    unbiased: bool,
) -> Result<ValueReport> {
    if g_pre.layout() != g_down.layout() {
        return Err(Error::Autodiff(vbpt_autodiff::Error::LayoutMismatch("g_pre and g_down layouts differ".into())));
    }
    if !g_pre.is_finite() || !g_down.is_finite() {
        return Err(Error::Autodiff(vbpt_autodiff::Error::NonFinite { op: "value" }));
    }
    let (s, rest) = subset.split(g_pre.layout())?;
    let (pre_s, down_s) = (g_pre.restrict(&s)?, g_down.restrict(&s)?);
    let (pre_r, down_r) = (g_pre.restrict(&rest)?, g_down.restrict(&rest)?);
    let v = pre_s.dot(&down_s)?.as_f64();
    Ok(ValueReport {
        v,
        v_full: Some(g_pre.dot(g_down)?.as_f64()),
        eta,
        g_pre_norm_s: pre_s.norm().as_f64(),
        g_down_norm_s: down_s.norm().as_f64(),
        omitted_bound: pre_r.norm().as_f64() * down_r.norm().as_f64(),
        predicted_improvement: eta * v,
        pre_batch,
        down_batch,
        unbiased,
    })
}

/// A pretraining loss whose targets or views depend on designer parameters.
pub trait Pretrain<T: Scalar> {
    fn loss(&self, g: &Graph<T>, theta: &Bound<T>, phi: &Bound<T>) -> Result<PretrainLoss<T>>;
}

pub struct PretrainLoss<T: Scalar> {
    pub loss: Var<T>,
    /// Designer-only penalty added to the meta objective.
    pub regularizer: Option<Var<T>>,
}

/// Downstream evaluators sharing one feedback batch.
pub trait Downstream<T: Scalar> {
    fn names(&self) -> Vec<String>;
    /// One loss per name, in order, built on `theta`.
    fn losses(&self, g: &Graph<T>, theta: &Bound<T>) -> Result<Vec<Var<T>>>;
}

fn finite<T: Scalar>(g: GradVector<T>, op: &'static str) -> Result<GradVector<T>> {
    if g.is_finite() {
        Ok(g)
    } else {
        Err(Error::Autodiff(vbpt_autodiff::Error::NonFinite { op }))
    }
}

/// `∇θ L_pre` over every learner parameter with the designer held fixed.
pub fn pre_gradient<T: Scalar>(pre: &dyn Pretrain<T>, theta: &ParamStore<T>, phi: &ParamStore<T>) -> Result<(T, GradVector<T>)> {
    let g = Graph::new();
    let tb = theta.bind(&g, true);
    let pb = phi.bind(&g, false);
    let out = pre.loss(&g, &tb, &pb)?;
    let grad = g.backward(&out.loss, &tb.param_set(), false)?;
    Ok((out.loss.item(), finite(grad, "g_pre")?))
}

/// `Σ_e w_e ∇θ L_down,e` over every learner parameter.
pub fn down_gradient<T: Scalar>(down: &dyn Downstream<T>, theta: &ParamStore<T>, weights: &FeedbackWeights) -> Result<GradVector<T>> {
    weights.validate()?;
    let g = Graph::new();
    let tb = theta.bind(&g, true);
    let losses = down.losses(&g, &tb)?;
    let mut total: Option<Var<T>> = None;
    for (name, l) in down.names().iter().zip(&losses) {
        let w = weights.get(name);
        if w == 0.0 {
            continue;
        }
        let term = l.scale(T::of(w))?;
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no configured evaluator carries positive weight".into()))?;
    let set = tb.param_set();
    let vars: Vec<&Var<T>> = set.vars().collect();
    let grads = g.grad(&total, &vars, GradOptions::default().allow_unused())?;
    let tensors: Vec<Tensor<T>> = grads
        .into_iter()
        .zip(set.layout().entries())
        .map(|(gr, e)| gr.map(|v| (*v.value()).clone()).unwrap_or_else(|| Tensor::zeros(&e.shape)))
        .collect();
    finite(GradVector::from_tensors(set.layout(), &tensors)?, "g_down")
}

/// Both gradients and their alignment on `S`.
#[allow(clippy::too_many_arguments)]
pub fn compute_value<T: Scalar>(
    theta: &ParamStore<T>,
    phi: &ParamStore<T>,
    pre: &dyn Pretrain<T>,
    down: &dyn Downstream<T>,
    subset: &ParamSubset,
    weights: &FeedbackWeights,
    eta: f64,
    batch_ids: (Vec<u64>, Vec<u64>),
) -> Result<ValueReport> {
    let (_, g_pre) = pre_gradient(pre, theta, phi)?;
    let g_down = down_gradient(down, theta, weights)?;
    let unbiased = batch_ids.0.iter().all(|i| !batch_ids.1.contains(i));
    value_report(&g_pre, &g_down, subset, eta, batch_ids.0, batch_ids.1, unbiased)
}

/// Result of differentiating the meta objective.
#[derive(Clone, Debug)]
pub struct MetaGradient<T: Scalar> {
    /// `-V + regularizer`.
    pub loss: f64,
    pub v: f64,
    pub regularizer: f64,
    pub grad: GradVector<T>,
    /// The meta objective did not depend on φ at all; `grad` is zero.
    pub phi_absent: bool,
}

/// `∇φ (-<g_down, ∇θ_S L_pre(θ; φ)> + regularizer)` by double backward.
///
/// `g_down` is a plain vector over the `S` layout, so nothing flows back into
/// the evaluators.
pub fn meta_gradient<T: Scalar>(
    pre: &dyn Pretrain<T>,
    theta: &ParamStore<T>,
    phi: &ParamStore<T>,
    subset: &ParamSubset,
    g_down: &GradVector<T>,
) -> Result<MetaGradient<T>> {
    let (s_layout, _) = subset.split(&theta.layout())?;
    if g_down.layout() != &s_layout {
        return Err(Error::Autodiff(vbpt_autodiff::Error::LayoutMismatch("g_down must cover exactly the subset".into())));
    }
    let g = Graph::new();
    let tb = theta.bind_some(&g, |n| subset.contains(n));
    let pb = phi.bind(&g, true);
    let out = pre.loss(&g, &tb, &pb)?;
    let s_set = tb.subset(|n| subset.contains(n));
    let s_vars: Vec<&Var<T>> = s_set.vars().collect();
    let g_pre = g.grad(&out.loss, &s_vars, GradOptions::create_graph().allow_unused())?;
    let mut v_node: Option<Var<T>> = None;
    for (k, gp) in g_pre.iter().enumerate() {
        let Some(gp) = gp else { continue };
        let term = gp.dot_const(&g_down.block_tensor(k)?)?;
        v_node = Some(match v_node {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    let v_node = v_node.unwrap_or_else(|| g.scalar(T::zero()));
    let mut meta = v_node.neg()?;
    let mut reg = 0.0;
    if let Some(r) = &out.regularizer {
        reg = r.item().as_f64();
        meta = meta.add(r)?;
    }
    let phi_set = pb.param_set();
    let phi_vars: Vec<&Var<T>> = phi_set.vars().collect();
    let grads = g.grad(&meta, &phi_vars, GradOptions::default().allow_unused())?;
    let phi_absent = grads.iter().all(Option::is_none);
    if phi_absent {
        log::warn!("meta objective does not depend on the designer; returning a zero gradient");
    }
    let tensors: Vec<Tensor<T>> = grads
        .into_iter()
        .zip(phi_set.layout().entries())
        .map(|(gr, e)| gr.map(|v| (*v.value()).clone()).unwrap_or_else(|| Tensor::zeros(&e.shape)))
        .collect();
    let grad = finite(GradVector::from_tensors(phi_set.layout(), &tensors)?, "meta_gradient")?;
    let v = v_node.item().as_f64();
    Ok(MetaGradient { loss: -v + reg, v, regularizer: reg, grad, phi_absent })
}

/// Standard normal direction over `layout`, rescaled to `norm`.
pub fn random_feedback_vector<T: Scalar>(layout: &Arc<Layout>, norm: f64, rng: &mut impl Rng) -> GradVector<T> {
    let raw: Vec<f64> = (0..layout.total()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    let c = if n > 0.0 { norm / n } else { 0.0 };
    GradVector::new(Arc::clone(layout), raw.into_iter().map(|x| T::of(x * c)).collect()).expect("sized to layout")
}

/// Next-token prediction with designer-produced soft targets.
pub struct LanguagePretrain<'a> {
    pub lm: &'a LmConfig,
    pub designer: &'a DesignerConfig,
    pub batch: &'a TokenBatch,
    pub rows: &'a LossRows,
}

impl<T: Scalar> Pretrain<T> for LanguagePretrain<'_> {
    fn loss(&self, g: &Graph<T>, theta: &Bound<T>, phi: &Bound<T>) -> Result<PretrainLoss<T>> {
        let out = lm_forward(self.lm, g, theta, self.batch)?;
        let logits = out.logits.value();
        let d = designer_targets(self.designer, g, phi, self.batch, self.rows, &logits)?;
        let loss = pretrain_loss(&out.logits, self.rows, &d.q_full(self.lm.vocab)?)?;
        Ok(PretrainLoss { loss, regularizer: None })
    }
}

/// Answer-span cross-entropy on a labeled feedback batch.
pub struct LanguageDownstream<'a> {
    pub lm: &'a LmConfig,
    pub batch: &'a TokenBatch,
    pub rows: &'a LossRows,
}

pub const LANGUAGE_EVALUATOR: &str = "answer";

impl<T: Scalar> Downstream<T> for LanguageDownstream<'_> {
    fn names(&self) -> Vec<String> {
        vec![LANGUAGE_EVALUATOR.to_string()]
    }

    fn losses(&self, g: &Graph<T>, theta: &Bound<T>) -> Result<Vec<Var<T>>> {
        Ok(vec![eval::language_downstream_loss(self.lm, g, theta, self.batch, self.rows)?])
    }
}

/// Masked latent prediction with designer masks, plus mask regularizers.
pub struct VisionPretrain<'a, T: Scalar> {
    pub cfg: &'a VisionConfig,
    pub images: &'a Tensor<T>,
    pub target: &'a Tensor<T>,
    pub lambda_spars: f64,
    pub lambda_tv: f64,
    pub keep_ratio: f64,
}

impl<T: Scalar> Pretrain<T> for VisionPretrain<'_, T> {
    fn loss(&self, g: &Graph<T>, theta: &Bound<T>, phi: &Bound<T>) -> Result<PretrainLoss<T>> {
        let x = g.constant(self.images.clone());
        let m = designer_mask(self.cfg, phi, &x)?;
        let loss = vision::ssl_loss(self.cfg, g, theta, &x, &m, self.target)?;
        let reg = sparsity_penalty(&m, self.keep_ratio)?
            .scale(T::of(self.lambda_spars))?
            .add(&tv_penalty(&m)?.scale(T::of(self.lambda_tv))?)?;
        Ok(PretrainLoss { loss, regularizer: Some(reg) })
    }
}

pub const SEG_EVALUATOR: &str = "seg";
pub const DEPTH_EVALUATOR: &str = "depth";

/// Segmentation and depth losses of fixed heads on learner features.
pub struct VisionDownstream<'a, T: Scalar> {
    pub cfg: &'a VisionConfig,
    pub heads: &'a ParamStore<T>,
    pub images: &'a [&'a DenseImage],
}

impl<T: Scalar> Downstream<T> for VisionDownstream<'_, T> {
    fn names(&self) -> Vec<String> {
        vec![SEG_EVALUATOR.to_string(), DEPTH_EVALUATOR.to_string()]
    }

    fn losses(&self, g: &Graph<T>, theta: &Bound<T>) -> Result<Vec<Var<T>>> {
        let x = crate::data::images::image_tensor(self.images, self.cfg.height, self.cfg.width);
        let f = vision::encode(self.cfg, theta, &g.constant(x))?;
        let hb = self.heads.bind(g, false);
        let (cls, dep) = eval::patch_labels(self.cfg, self.images);
        let l = eval::dense_losses(self.cfg, g, &hb, &f, &cls, &dep)?;
        Ok(vec![l.seg, l.depth])
    }
}

/// `-V + λ_spars R_spars + λ_tv R_tv` and its designer gradient.
pub fn mask_meta_loss<T: Scalar>(
    pre: &VisionPretrain<'_, T>,
    theta: &ParamStore<T>,
    phi: &ParamStore<T>,
    subset: &ParamSubset,
    g_down: &GradVector<T>,
) -> Result<MetaGradient<T>> {
    meta_gradient(pre, theta, phi, subset, g_down)
}
