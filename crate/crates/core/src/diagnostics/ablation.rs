//! Matched-budget comparison of methods over several seeds on the final
//! primary metric.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{Method, RunConfig};
use crate::error::{Error, Result};
use crate::trainer::{train, TaskData, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub method: String,
    pub seeds: Vec<u64>,
    pub scores: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over seeds.
    pub std: f64,
}

/// Difference of the reference arm against another arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub against: String,
    pub mean_diff: f64,
    /// `mean_diff` over the pooled standard deviation; `None` when both arms
    /// are constant.
    pub cohens_d: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub reference: String,
    pub arms: Vec<AblationArm>,
    pub effects: Vec<EffectSize>,
}

impl AblationReport {
    /// The reference arm has the strictly highest mean.
    pub fn reference_wins(&self) -> bool {
        !self.effects.is_empty() && self.effects.iter().all(|e| e.mean_diff > 0.0)
    }

    pub fn arm(&self, method: &str) -> Option<&AblationArm> {
        self.arms.iter().find(|a| a.method == method)
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, 0.0);
    }
    (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)).sqrt())
}

pub fn arm(method: &str, seeds: Vec<u64>, scores: Vec<f64>) -> AblationArm {
    let (mean, std) = mean_std(&scores);
    AblationArm { method: method.to_string(), seeds, scores, mean, std }
}

/// Effect sizes of `reference` against every other arm.
pub fn summarize(reference: &str, arms: Vec<AblationArm>) -> Result<AblationReport> {
    let r = arms.iter().find(|a| a.method == reference).ok_or_else(|| Error::Config(format!("no arm for `{reference}`")))?;
    let effects = arms
        .iter()
        .filter(|a| a.method != reference)
        .map(|a| {
            let pooled = ((r.std * r.std + a.std * a.std) / 2.0).sqrt();
            let mean_diff = r.mean - a.mean;
            EffectSize { against: a.method.clone(), mean_diff, cohens_d: (pooled > 0.0).then(|| mean_diff / pooled) }
        })
        .collect();
    Ok(AblationReport { reference: reference.to_string(), arms, effects })
}

/// Trains every `(method, seed)` pair from `base` and compares final primary
/// metrics against the first method. Run directories go under
/// `root/<method>-s<seed>` when `root` is given.
pub fn run_ablation(base: &RunConfig, methods: &[Method], seeds: &[u64], root: Option<&Path>) -> Result<AblationReport> {
    if methods.len() < 2 || seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least two methods and one seed".into()));
    }
    let data = TaskData::for_config(base)?;
    let mut arms = Vec::with_capacity(methods.len());
    for &m in methods {
        let mut scores = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = RunConfig { method: m, seed, ..base.clone() };
            let dir = root.map(|r| r.join(format!("{}-s{seed}", m.name())));
            let out = train(&cfg, &data, dir.as_deref(), &TrainOptions::default())?;
            let e = out.final_eval.ok_or_else(|| Error::Insufficient("run ended without a final evaluation".into()))?;
            log::info!("{} seed {seed}: {:.4}", m.name(), e.primary);
            scores.push(e.primary);
        }
        arms.push(arm(m.name(), seeds.to_vec(), scores));
    }
    summarize(methods[0].name(), arms)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effect_sizes() {
        let arms = vec![arm("a", vec![0, 1], vec![0.5, 0.7]), arm("b", vec![0, 1], vec![0.4, 0.6]), arm("c", vec![0, 1], vec![0.6, 0.6])];
        let r = summarize("a", arms).unwrap();
        assert!((r.effects[0].mean_diff - 0.1).abs() < 1e-12);
        let sd = 0.2f64.hypot(0.0) / 2f64.sqrt();
        assert!((r.effects[0].cohens_d.unwrap() - 0.1 / sd).abs() < 1e-9);
        assert_eq!(r.effects[1].mean_diff, 0.0);
        assert!(!r.reference_wins());
        assert!(summarize("z", vec![]).is_err());
    }
}
