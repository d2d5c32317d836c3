//! Run configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::images::DenseImageSpec;
use crate::data::language::LanguageTaskSpec;
use crate::designer::DesignerConfig;
use crate::error::{Error, Result};
use crate::lm::LmConfig;
use crate::mask_designer::MaskDesignerConfig;
use crate::optim::AdamConfig;
use crate::value::{FeedbackWeights, ParamSubset, DEPTH_EVALUATOR, LANGUAGE_EVALUATOR, SEG_EVALUATOR};
use crate::vision::VisionConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Value,
    BaselineNtp,
    RandomFeedback,
    UniformSmoothing,
    SelfDistillation,
}

impl Method {
    /// Methods that run designer updates.
    pub fn has_meta_steps(self) -> bool {
        matches!(self, Method::Value | Method::RandomFeedback)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Value => "value",
            Method::BaselineNtp => "baseline_ntp",
            Method::RandomFeedback => "random_feedback",
            Method::UniformSmoothing => "uniform_smoothing",
            Method::SelfDistillation => "self_distillation",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LanguageEval {
    /// Held-out problems scored at each evaluation (all when `None`).
    pub n_heldout: Option<usize>,
    /// Pass@k values reported at the end of the run.
    pub pass_k: Vec<usize>,
    pub pool: usize,
    pub temperature: f64,
}

impl Default for LanguageEval {
    fn default() -> Self {
        LanguageEval { n_heldout: None, pass_k: vec![], pool: 16, temperature: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
#[serde(deny_unknown_fields, default)]
pub struct LanguageRun {
    pub data: LanguageTaskSpec,
    pub model: LmConfig,
    pub designer: DesignerConfig,
    /// Fixed gate of the smoothing arms; half the designer's `alpha_max` when unset.
    pub smoothing_alpha: Option<f64>,
    pub eval: LanguageEval,
}

impl LanguageRun {
    pub fn smoothing_alpha(&self) -> f64 {
        self.smoothing_alpha.unwrap_or(self.designer.alpha_max / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadTraining {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for HeadTraining {
    fn default() -> Self {
        HeadTraining { steps: 20, lr: 1e-2, batch: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisionRun {
    pub data: DenseImageSpec,
    pub model: VisionConfig,
    pub mask: MaskDesignerConfig,
    pub keep_ratio: f64,
    pub lambda_spars: f64,
    pub lambda_tv: f64,
    /// Head updates before each designer step.
    pub refresh: HeadTraining,
    /// Fresh heads fitted on frozen features for every evaluation.
    pub eval_heads: HeadTraining,
}

impl Default for VisionRun {
    fn default() -> Self {
        VisionRun {
            data: DenseImageSpec::default(),
            model: VisionConfig::default(),
            mask: MaskDesignerConfig::default(),
            keep_ratio: 0.5,
            lambda_spars: 1.0,
            lambda_tv: 0.01,
            refresh: HeadTraining::default(),
            eval_heads: HeadTraining { steps: 200, lr: 1e-2, batch: 32 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskConfig {
    Language(LanguageRun),
    Vision(VisionRun),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Probe every this many learner steps.
    pub every: u64,
    /// Step size of the plain gradient step being predicted.
    pub eta: f64,
    /// Probe examples per measurement.
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    pub steps: u64,
    pub batch_size: usize,
    #[serde(default = "one")]
    pub grad_accum: usize,
    #[serde(default)]
    pub learner_optim: AdamConfig,
    #[serde(default = "AdamConfig::designer")]
    pub designer_optim: AdamConfig,
    #[serde(default = "four")]
    pub meta_period: u64,
    /// Steps before the first designer update; 10% of `steps` when unset.
    #[serde(default)]
    pub burn_in: Option<u64>,
    /// Name prefixes of the alignment subset; the task default when unset.
    #[serde(default)]
    pub subset: Option<Vec<String>>,
    /// Per-evaluator weights; the task default when unset.
    #[serde(default)]
    pub feedback_weights: Option<FeedbackWeights>,
    #[serde(default = "eight")]
    pub feedback_batch: usize,
    /// Evaluate every this many steps (and always at the end); 0 = end only.
    #[serde(default)]
    pub eval_every: u64,
    /// Write a checkpoint every this many steps (and at the end); 0 = end only.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
    #[serde(default)]
    pub precision: Precision,
    /// Load task data from here instead of regenerating it from the spec.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    pub task: TaskConfig,
}

fn one() -> usize {
    1
}
fn four() -> u64 {
    4
}
fn eight() -> usize {
    8
}

/// Fields that may legitimately differ between compute-matched runs.
const METHOD_SPECIFIC: &[&str] = &[
    "method",
    "designer_optim",
    "meta_period",
    "burn_in",
    "subset",
    "feedback_weights",
    "feedback_batch",
    "task.language.designer",
    "task.language.smoothing_alpha",
    "task.vision.mask",
    "task.vision.lambda_spars",
    "task.vision.lambda_tv",
    "task.vision.refresh",
];

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn burn_in(&self) -> u64 {
        self.burn_in.unwrap_or(self.steps / 10)
    }

    pub fn subset(&self) -> ParamSubset {
        match (&self.subset, &self.task) {
            (Some(p), _) => ParamSubset::from_prefixes(p.clone()),
            (None, TaskConfig::Language(l)) => ParamSubset::lm_default(&l.model),
            (None, TaskConfig::Vision(v)) => ParamSubset::vision_default(&v.model),
        }
    }

    pub fn feedback_weights(&self) -> FeedbackWeights {
        match (&self.feedback_weights, &self.task) {
            (Some(w), _) => w.clone(),
            (None, TaskConfig::Language(_)) => FeedbackWeights::single(LANGUAGE_EVALUATOR),
            (None, TaskConfig::Vision(_)) => FeedbackWeights([(SEG_EVALUATOR.to_string(), 1.0), (DEPTH_EVALUATOR.to_string(), 1.0)].into()),
        }
    }

    /// Unlabeled tokens (or pixels, for images) consumed per learner step.
    pub fn tokens_per_step(&self) -> u64 {
        let per_example = match &self.task {
            TaskConfig::Language(l) => l.data.seq_len,
            TaskConfig::Vision(v) => v.model.height * v.model.width,
        };
        (self.batch_size * per_example * self.grad_accum) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch_size == 0 || self.grad_accum == 0 || self.feedback_batch == 0 {
            return bad("steps, batch_size, grad_accum and feedback_batch must be positive".into());
        }
        if self.meta_period == 0 {
            return bad("meta_period must be positive".into());
        }
        if self.burn_in() > self.steps {
            return bad(format!("burn_in {} exceeds steps {}", self.burn_in(), self.steps));
        }
        self.learner_optim.validate()?;
        self.designer_optim.validate()?;
        self.feedback_weights().validate()?;
        if let Some(p) = &self.probe {
            if p.every == 0 || p.batch == 0 || !(p.eta > 0.0) {
                return bad("probe.every, probe.batch and probe.eta must be positive".into());
            }
        }
        match &self.task {
            TaskConfig::Language(l) => {
                l.model.validate()?;
                l.designer.validate()?;
                if l.designer.vocab != l.model.vocab || l.designer.max_seq < l.data.seq_len || l.model.max_seq < l.data.seq_len {
                    return bad("designer and learner must share the vocabulary and cover seq_len".into());
                }
                let a = l.smoothing_alpha();
                if !(0.0..=1.0).contains(&a) {
                    return bad(format!("smoothing_alpha {a} outside [0, 1]"));
                }
                if l.eval.pass_k.iter().any(|&k| k == 0 || k > l.eval.pool) || !(l.eval.temperature > 0.0) {
                    return bad("pass_k entries must lie in [1, pool] and temperature must be positive".into());
                }
                for name in self.feedback_weights().0.keys() {
                    if name != LANGUAGE_EVALUATOR {
                        return bad(format!("unknown evaluator `{name}` for the language task"));
                    }
                }
            }
            TaskConfig::Vision(v) => {
                v.model.validate()?;
                v.data.validate()?;
                if v.data.height != v.model.height || v.data.width != v.model.width || v.data.n_classes != v.model.n_classes {
                    return bad("image spec and vision model disagree on geometry or classes".into());
                }
                if self.probe.is_some() {
                    return bad("probes apply to the language task only".into());
                }
                if matches!(self.method, Method::UniformSmoothing | Method::SelfDistillation) {
                    return bad(format!("method {} applies to the language task only", self.method.name()));
                }
                if !(0.0..=1.0).contains(&v.keep_ratio) || v.lambda_spars < 0.0 || v.lambda_tv < 0.0 {
                    return bad("keep_ratio must lie in [0, 1] and the penalties must be nonnegative".into());
                }
                for name in self.feedback_weights().0.keys() {
                    if name != SEG_EVALUATOR && name != DEPTH_EVALUATOR {
                        return bad(format!("unknown evaluator `{name}` for the image task"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Checks that two runs differ only in method-specific fields; returns
    /// the offending paths otherwise.
    pub fn compute_matched(&self, other: &RunConfig) -> std::result::Result<(), Vec<String>> {
        let strip = |c: &RunConfig| {
            let mut v = serde_json::to_value(c).expect("config serializes");
            for path in METHOD_SPECIFIC {
                remove_path(&mut v, path);
            }
            v
        };
        let mut diffs = Vec::new();
        diff_paths(&strip(self), &strip(other), "", &mut diffs);
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(diffs)
        }
    }
}

fn remove_path(v: &mut Value, path: &str) {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty path");
    let mut cur = v;
    for p in parts {
        match cur.get_mut(p) {
            Some(next) => cur = next,
            None => return,
        }
    }
    if let Some(obj) = cur.as_object_mut() {
        obj.remove(last);
    }
}

fn diff_paths(a: &Value, b: &Value, at: &str, out: &mut Vec<String>) {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
            for k in keys {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match (x.get(k), y.get(k)) {
                    (Some(p), Some(q)) => diff_paths(p, q, &path, out),
                    _ => out.push(path),
                }
            }
        }
        _ if a != b => out.push(at.to_string()),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
method = "baseline_ntp"
steps = 100
batch_size = 4

[task.language]
"#;

    #[test]
    fn minimal_config_parses_and_round_trips() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.burn_in(), 10);
        assert_eq!(c.meta_period, 4);
        assert_eq!(c.designer_optim.lr, 1e-3);
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let err = RunConfig::from_toml(&format!("{MINIMAL}\nbogus_key = 1\n")).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
        let nested = MINIMAL.replace("[task.language]", "[task.language]\n[task.language.model]\nwidth = 3");
        assert!(RunConfig::from_toml(&nested).unwrap_err().to_string().contains("width"));
    }

    #[test]
    fn compute_matching_ignores_method_fields_only() {
        let base = RunConfig::from_toml(MINIMAL).unwrap();
        let mut value = base.clone();
        value.method = Method::Value;
        value.meta_period = 8;
        if let TaskConfig::Language(l) = &mut value.task {
            l.designer.alpha_max = 0.0;
        }
        assert!(base.compute_matched(&value).is_ok());
        value.batch_size = 5;
        value.learner_optim.lr = 1.0;
        let diffs = base.compute_matched(&value).unwrap_err();
        assert_eq!(diffs, vec!["batch_size".to_string(), "learner_optim.lr".to_string()]);
    }
}
