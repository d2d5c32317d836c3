//! Named verification checks with pass/fail outcomes, as run by `verify`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use vbpt_autodiff::{GradVector, Graph, Tensor};

use super::overhead::{check_cadence, compare_overhead, measure_overhead};
use super::probe::{check_probe, pearson};
use super::quadratic::{check_descent_bound, check_descent_equality, quadratic_probes, QuadraticTestbed};
use super::surrogate::{check_first_order_surrogate, eta_grid, QuadraticInstance, TransformerInstance};
use super::unbiased::{check_unbiasedness, dependence_demo, toy_example_gradients, two_point_set};
use super::Faults;
use crate::config::{Method, ProbeConfig, RunConfig};
use crate::data::decontam::{jaccard, ngrams};
use crate::data::language::gen_language_task;
use crate::designer::{init_designer, DesignerConfig};
use crate::error::{Error, Result};
use crate::lm::{init_lm, LmConfig, TokenBatch};
use crate::mask_designer::{sparsity_penalty, tv_penalty};
use crate::params::ParamStore;
use crate::presets::{tiny_language, tiny_language_run};
use crate::targets::{loss_rows, LossRows};
use crate::trainer::{train, TaskData, TrainOptions};
use crate::value::{down_gradient, meta_gradient, pre_gradient, FeedbackWeights, LanguageDownstream, LanguagePretrain, ParamSubset, LANGUAGE_EVALUATOR};

/// Every check, in the order `run_suite` runs them.
pub const CHECKS: &[&str] = &[
    "descent_bound",
    "surrogate_slope",
    "unbiasedness",
    "meta_gradient",
    "baseline_equivalence",
    "probe_correlation",
    "regularizers",
    "decontamination",
    "overhead",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
    /// The underlying report.
    pub report: serde_json::Value,
}

struct Verdict {
    passed: bool,
    detail: String,
    report: serde_json::Value,
}

/// Runs one check. An error inside the check counts as a failure; an unknown
/// name is a configuration error.
pub fn run_check(name: &str, faults: Faults) -> Result<CheckOutcome> {
    let f: fn(Faults) -> Result<Verdict> = match name {
        "descent_bound" => descent_bound,
        "surrogate_slope" => surrogate_slope,
        "unbiasedness" => unbiasedness,
        "meta_gradient" => meta_gradient_fd,
        "baseline_equivalence" => baseline_equivalence,
        "probe_correlation" => probe_correlation,
        "regularizers" => regularizers,
        "decontamination" => decontamination,
        "overhead" => overhead,
        other => return Err(Error::Config(format!("unknown check `{other}`; known: {}", CHECKS.join(", ")))),
    };
    let t0 = Instant::now();
    let v = f(faults).unwrap_or_else(|e| Verdict { passed: false, detail: format!("error: {e}"), report: serde_json::Value::Null });
    Ok(CheckOutcome { name: name.to_string(), passed: v.passed, detail: v.detail, seconds: t0.elapsed().as_secs_f64(), report: v.report })
}

pub fn run_suite(only: &[String], faults: Faults) -> Result<Vec<CheckOutcome>> {
    let names: Vec<&str> = if only.is_empty() { CHECKS.to_vec() } else { only.iter().map(String::as_str).collect() };
    names.into_iter().map(|n| run_check(n, faults)).collect()
}

fn descent_bound(_: Faults) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let tb = QuadraticTestbed::random(8, 2.0, &mut rng)?;
    let rep = check_descent_bound(&tb, 10_000, 1.0 / tb.l, 1e-9, &mut rng);
    let worst_eq = check_descent_equality(8, 2.0, 1000, &mut rng)?;
    let passed = rep.passed() && worst_eq <= 1e-9;
    Ok(Verdict {
        passed,
        detail: format!("{} violations in {} states, min slack {:.3e}; equality gap {:.1e} for A = L·I", rep.violations, rep.trials, rep.min_slack, worst_eq),
        report: json!({ "bound": rep, "equality_gap": worst_eq }),
    })
}

fn surrogate_slope(faults: Faults) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let etas = eta_grid(1e-1, 1e-4, 10);
    let tb = QuadraticTestbed::random(8, 2.0, &mut rng)?;
    let gauss = |rng: &mut ChaCha8Rng| (0..8).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect::<Vec<_>>();
    let quad = QuadraticInstance { tb, theta: gauss(&mut rng), g_pre: gauss(&mut rng) };
    let linear = QuadraticInstance { tb: QuadraticTestbed::new(8, vec![0.0; 64], gauss(&mut rng))?, theta: gauss(&mut rng), g_pre: gauss(&mut rng) };
    let net = TransformerInstance::toy(12)?;
    let reports = [
        ("quadratic", check_first_order_surrogate(&quad, &etas, faults)?),
        ("linear", check_first_order_surrogate(&linear, &etas, faults)?),
        ("transformer", check_first_order_surrogate(&net, &etas, faults)?),
    ];
    let passed = reports.iter().all(|(_, r)| r.passed());
    let fmt = |s: Option<f64>| s.map(|s| format!("{s:.3}")).unwrap_or_else(|| "exact".into());
    let detail = reports
        .iter()
        .map(|(n, r)| format!("{n}: slope {}, corrected {}", fmt(r.slope), fmt(r.corrected_slope)))
        .collect::<Vec<_>>()
        .join("; ");
    let report = json!(reports.iter().map(|(n, r)| (n.to_string(), json!(r))).collect::<serde_json::Map<_, _>>());
    Ok(Verdict { passed, detail, report })
}

fn unbiasedness(_: Faults) -> Result<Verdict> {
    let mut rows = Vec::new();
    let mut passed = true;
    let mut parts = Vec::new();
    for seed in [1, 2, 3] {
        let (pre, down) = toy_example_gradients(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let rep = check_unbiasedness(&pre, &down, 4, 4, 1000, &mut rng)?;
        let full = check_unbiasedness(&pre, &down, pre.len(), down.len(), 2, &mut rng)?;
        passed &= rep.passed() && full.passed();
        parts.push(format!("seed {seed}: |mean − V| = {:.2} SE", (rep.mean - rep.v_full).abs() / rep.se));
        rows.push(json!({ "seed": seed, "minibatch": rep, "full_batch": full }));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let demo = dependence_demo(&two_point_set(), 4000, &mut rng)?;
    passed &= demo.bias_detected();
    parts.push(format!(
        "dependent sampling: mean {:.3} vs V {:.3} (trace-covariance {:.3})",
        demo.dependent.0, demo.v_full, demo.trace_cov
    ));
    Ok(Verdict { passed, detail: parts.join("; "), report: json!({ "seeds": rows, "dependence": demo }) })
}

/// Learner and designer small enough for coordinate-wise finite differences.
fn fd_setup(seed: u64) -> (LmConfig, DesignerConfig, ParamStore<f64>, ParamStore<f64>, [(TokenBatch, LossRows); 2]) {
    let lm = LmConfig { vocab: 16, d_model: 8, n_heads: 2, n_layers: 3, d_ff: 16, max_seq: 12 };
    let designer = DesignerConfig { vocab: 16, d_model: 4, n_heads: 1, n_layers: 0, d_ff: 4, max_seq: 12, top_k: 4, alpha_max: 0.5 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = init_lm(&lm, &mut rng);
    let phi = init_designer(&designer, &mut rng);
    let mut batch = || {
        let rows: Vec<Vec<u32>> = (0..2).map(|_| (0..10).map(|_| rng.random_range(2..16)).collect()).collect();
        let tb = TokenBatch::from_rows(&rows).expect("equal rows");
        let mask: Vec<bool> = (0..20).map(|i| i % 10 >= 5).collect();
        let lr = loss_rows(&tb, &mask).expect("mask sized to batch");
        (tb, lr)
    };
    let batches = [batch(), batch()];
    (lm, designer, theta, phi, batches)
}

fn meta_gradient_fd(_: Faults) -> Result<Verdict> {
    let (lm, designer, theta, phi, [pre_b, down_b]) = fd_setup(50);
    let subset = ParamSubset::lm_default(&lm);
    let down = LanguageDownstream { lm: &lm, batch: &down_b.0, rows: &down_b.1 };
    let g_down = down_gradient(&down, &theta, &FeedbackWeights::single(LANGUAGE_EVALUATOR))?;
    let g_down = g_down.restrict(&subset.split(&theta.layout())?.0)?;
    let pre = LanguagePretrain { lm: &lm, designer: &designer, batch: &pre_b.0, rows: &pre_b.1 };
    let mg = meta_gradient(&pre, &theta, &phi, &subset, &g_down)?;
    let neg_value = |p: &ParamStore<f64>| -> Result<f64> {
        let (_, g_pre) = pre_gradient(&pre, &theta, p)?;
        Ok(-g_pre.restrict(g_down.layout())?.dot(&g_down)?)
    };
    let eps = 1e-4;
    let base = phi.to_flat();
    let mut fd = Vec::with_capacity(base.len());
    let mut probe = phi.clone();
    for i in 0..base.len() {
        let mut f = base.clone();
        f[i] = base[i] + eps;
        probe.set_flat(&f)?;
        let plus = neg_value(&probe)?;
        f[i] = base[i] - eps;
        probe.set_flat(&f)?;
        let minus = neg_value(&probe)?;
        fd.push((plus - minus) / (2.0 * eps));
    }
    let fd = GradVector::new(phi.layout(), fd)?;
    let diff = mg.grad.axpy(-1.0, &fd)?.norm();
    let rel = diff / fd.norm().max(f64::MIN_POSITIVE);
    Ok(Verdict {
        passed: phi.numel() <= 200 && fd.norm() > 0.0 && rel < 1e-3,
        detail: format!("{} designer parameters, relative error {rel:.2e}", phi.numel()),
        report: json!({ "params": phi.numel(), "relative_error": rel }),
    })
}

fn baseline_equivalence(_: Faults) -> Result<Verdict> {
    let mut value = tiny_language(Method::Value, 7, 100);
    if let crate::config::TaskConfig::Language(l) = &mut value.task {
        l.designer.alpha_max = 0.0;
    }
    let base = RunConfig { method: Method::BaselineNtp, ..value.clone() };
    let data = TaskData::for_config(&value)?;
    let a = train(&value, &data, None, &TrainOptions::default())?;
    let b = train(&base, &data, None, &TrainOptions::default())?;
    let worst = a.records.iter().zip(&b.records).map(|(x, y)| (x.l_pre - y.l_pre).abs()).fold(0.0, f64::max);
    let same = a.records.len() == b.records.len() && a.records.len() == 100;
    Ok(Verdict {
        passed: same && worst <= 1e-9,
        detail: format!("max per-step loss gap {worst:.1e} over {} steps", a.records.len()),
        report: json!({ "steps": a.records.len(), "max_gap": worst }),
    })
}

/// Value run with a probe after every step.
pub fn probe_run_config(seed: u64, steps: u64) -> RunConfig {
    RunConfig { probe: Some(ProbeConfig { every: 1, eta: 0.05, batch: 8 }), ..tiny_language(Method::Value, seed, steps) }
}

fn probe_correlation(_: Faults) -> Result<Verdict> {
    let cfg = probe_run_config(21, 200);
    let data = TaskData::for_config(&cfg)?;
    let out = train(&cfg, &data, None, &TrainOptions::default())?;
    let rep = check_probe(&out.probes, 100, 21)?;
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let tb = QuadraticTestbed::random(8, 2.0, &mut rng)?;
    let quad = quadratic_probes(&tb, 200, 1e-4, &mut rng);
    let x: Vec<f64> = quad.iter().map(|p| p.predicted).collect();
    let y: Vec<f64> = quad.iter().map(|p| p.realized).collect();
    let quad_r = pearson(&x, &y).unwrap_or(0.0);
    Ok(Verdict {
        passed: rep.passed() && quad_r > 0.99,
        detail: format!("r = {:.3} over {} probes, shuffled r = {:.3}; quadratic r = {quad_r:.5}", rep.r, rep.n, rep.shuffled_r),
        report: json!({ "language": rep, "quadratic_r": quad_r }),
    })
}

fn regularizers(_: Faults) -> Result<Verdict> {
    let g = Graph::<f64>::new();
    let keep = 0.3;
    let constant = g.constant(Tensor::new(vec![keep; 2 * 4 * 4], &[2, 4, 4])?);
    let spars = sparsity_penalty(&constant, keep)?.item();
    let tv_const = tv_penalty(&constant)?.item();
    let checker = g.constant(Tensor::new(vec![0.0, 1.0, 1.0, 0.0], &[1, 2, 2])?);
    let tv_checker = tv_penalty(&checker)?.item();
    let passed = spars.abs() < 1e-15 && tv_const == 0.0 && tv_checker == 4.0;
    Ok(Verdict {
        passed,
        detail: format!("sparsity at keep ratio {spars:.1e}, TV of constant {tv_const}, TV of 2×2 checkerboard {tv_checker}"),
        report: json!({ "sparsity": spars, "tv_constant": tv_const, "tv_checkerboard": tv_checker }),
    })
}

fn decontamination(_: Faults) -> Result<Verdict> {
    let mut spec = tiny_language_run().data;
    spec.planted_duplicates = 20;
    spec.seq_len = 128;
    spec.corpus.grammar.operand_max = 99;
    spec.corpus.grammar.word_problem_frac = 0.5;
    spec.downstream.grammar = spec.corpus.grammar.clone();
    let task = gen_language_task(&spec)?;
    let removed: std::collections::HashSet<usize> = task.report.removals.iter().map(|r| r.corpus_index).collect();
    let found = task.planted.iter().filter(|i| removed.contains(i)).count();
    let refs: Vec<_> = task.labeled().map(|e| ngrams(&e.text(), spec.decontam.n)).collect();
    let mut disjoint = 0;
    let mut false_pos = 0;
    for (i, ex) in task.raw_corpus.iter().enumerate() {
        let grams = ngrams(&ex.text(), spec.decontam.n);
        let best = refs.iter().map(|r| jaccard(&grams, r)).fold(0.0, f64::max);
        if best < spec.decontam.threshold {
            disjoint += 1;
            if removed.contains(&i) {
                false_pos += 1;
            }
        }
    }
    let recall = found as f64 / task.planted.len().max(1) as f64;
    Ok(Verdict {
        passed: !task.planted.is_empty() && recall == 1.0 && false_pos == 0,
        detail: format!("recall {found}/{} planted; {false_pos} of {disjoint} disjoint examples removed", task.planted.len()),
        report: json!({ "planted": task.planted.len(), "found": found, "disjoint": disjoint, "false_positives": false_pos }),
    })
}

/// Value and baseline runs sharing the tiny language settings, with a meta
/// step every `period` learner steps.
pub fn overhead_configs(period: u64, steps: u64) -> (RunConfig, RunConfig) {
    let mut value = tiny_language(Method::Value, 31, steps);
    value.meta_period = period;
    value.burn_in = Some(0);
    let baseline = RunConfig { method: Method::BaselineNtp, ..value.clone() };
    (value, baseline)
}

fn overhead(_: Faults) -> Result<Verdict> {
    let period = 16;
    let warmup = 20;
    let steps = warmup + 2 * period * 24;
    let (value, baseline) = overhead_configs(period, steps);
    let data = TaskData::for_config(&value)?;
    let cmp = compare_overhead(measure_overhead(&value, &data, warmup)?, measure_overhead(&baseline, &data, warmup)?);
    let cadence = check_cadence(&value, &data, warmup)?;
    let passed = cmp.baseline.value_fraction == 0.0 && cmp.value.value_fraction > 0.0 && cadence.passed();
    Ok(Verdict {
        passed,
        detail: format!(
            "value fraction {:.3} (baseline {}), throughput {:+.1}%, step time {:+.1}%; period {}→{} fraction ratio {:.2}",
            cmp.value.value_fraction,
            cmp.baseline.value_fraction,
            100.0 * cmp.throughput_change,
            100.0 * cmp.step_time_inflation,
            cadence.period,
            2 * cadence.period,
            cadence.ratio
        ),
        report: json!({ "comparison": cmp, "cadence": cadence }),
    })
}
