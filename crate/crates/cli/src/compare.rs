//! Cross-run tables (mean ± std over seeds per method), evaluation curves
//! against unlabeled tokens, and Pareto scatter data.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vbpt_core::config::{RunConfig, TaskConfig};
use vbpt_core::diagnostics::ablation::mean_std;
use vbpt_core::trainer::sweep::flag_dominated;
use vbpt_core::trainer::{read_metrics, EvalMetrics, MetricsRecord, RunSummary};
use vbpt_core::value::{DEPTH_EVALUATOR, SEG_EVALUATOR};

pub struct RunInfo {
    pub id: String,
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub cfg: RunConfig,
    pub records: Vec<MetricsRecord>,
    pub final_eval: EvalMetrics,
}

pub fn load_run(dir: &Path) -> Result<RunInfo> {
    let summary = RunSummary::load(dir).with_context(|| format!("{} is not a run directory", dir.display()))?;
    let cfg = RunConfig::from_toml(&std::fs::read_to_string(dir.join("config.toml"))?)?;
    let final_eval = summary.final_eval.clone().with_context(|| format!("{} has no final evaluation", dir.display()))?;
    let id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
    Ok(RunInfo { id, dir: dir.to_path_buf(), records: read_metrics(dir)?, summary, cfg, final_eval })
}

/// Named final metrics of a run; higher is better unless `lower_better`.
fn metrics(r: &RunInfo) -> Vec<(String, f64, bool)> {
    let e = &r.final_eval;
    match r.cfg.task {
        TaskConfig::Language(_) => {
            let mut m = vec![("pass@1".to_string(), e.primary, false)];
            m.extend(e.pass_k.iter().filter(|(k, _)| *k != 1).map(|(k, v)| (format!("pass@{k}"), *v, false)));
            m
        }
        TaskConfig::Vision(_) => {
            let mut m = vec![("miou".to_string(), e.primary, false)];
            if let Some(s) = e.secondary {
                m.push(("rmse".to_string(), s, true));
            }
            m
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    /// `mean − baseline mean`.
    pub delta: f64,
    /// `delta / |baseline mean|` in percent, signed so that positive is better.
    pub improvement_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub run: String,
    pub method: String,
    pub seed: u64,
    pub step: u64,
    pub tokens: u64,
    pub eval: f64,
    pub best_so_far: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub run: String,
    pub method: String,
    pub seed: u64,
    pub seg_weight: f64,
    pub depth_weight: f64,
    pub miou: f64,
    pub rmse: f64,
    pub dominated: bool,
}

pub struct Comparison {
    pub baseline: String,
    pub table: Vec<TableRow>,
    pub curves: Vec<CurvePoint>,
    pub pareto: Vec<ParetoPoint>,
}

/// Compares runs grouped by method against the `baseline` method (the first
/// run's method when unset or absent).
pub fn compare(runs: &[RunInfo], baseline: Option<&str>) -> Result<Comparison> {
    if runs.is_empty() {
        bail!(vbpt_core::Error::Config("nothing to compare".into()));
    }
    let names = |r: &RunInfo| metrics(r).into_iter().map(|(n, _, _)| n).collect::<Vec<_>>();
    let reference = names(&runs[0]);
    for r in &runs[1..] {
        if names(r) != reference {
            bail!(vbpt_core::Error::Config(format!(
                "incompatible metric sets: {} has {:?}, {} has {:?}",
                runs[0].id,
                reference,
                r.id,
                names(r)
            )));
        }
    }
    let mut methods: Vec<String> = Vec::new();
    for r in runs {
        if !methods.contains(&r.summary.method) {
            methods.push(r.summary.method.clone());
        }
    }
    let baseline = baseline.filter(|b| methods.iter().any(|m| m == b)).map(str::to_string).unwrap_or_else(|| methods[0].clone());

    let values = |method: &str, k: usize| -> Vec<f64> { runs.iter().filter(|r| r.summary.method == method).map(|r| metrics(r)[k].1).collect() };
    let mut table = Vec::new();
    for (k, (metric, _, lower_better)) in metrics(&runs[0]).into_iter().enumerate() {
        let (base_mean, _) = mean_std(&values(&baseline, k));
        for m in &methods {
            let v = values(m, k);
            let (mean, std) = mean_std(&v);
            let delta = mean - base_mean;
            let sign = if lower_better { -1.0 } else { 1.0 };
            let improvement_pct = (base_mean != 0.0).then(|| 100.0 * sign * delta / base_mean.abs());
            table.push(TableRow { method: m.clone(), metric: metric.clone(), n: v.len(), mean, std, delta, improvement_pct });
        }
    }

    let curves = runs
        .iter()
        .flat_map(|r| {
            r.records.iter().filter_map(move |rec| {
                Some(CurvePoint {
                    run: r.id.clone(),
                    method: r.summary.method.clone(),
                    seed: r.summary.seed,
                    step: rec.step,
                    tokens: rec.tokens,
                    eval: rec.eval?,
                    best_so_far: rec.best_so_far?,
                })
            })
        })
        .collect();

    let mut pareto: Vec<ParetoPoint> = runs
        .iter()
        .filter_map(|r| {
            let rmse = r.final_eval.secondary?;
            let w = r.cfg.feedback_weights();
            Some(ParetoPoint {
                run: r.id.clone(),
                method: r.summary.method.clone(),
                seed: r.summary.seed,
                seg_weight: w.get(SEG_EVALUATOR),
                depth_weight: w.get(DEPTH_EVALUATOR),
                miou: r.final_eval.primary,
                rmse,
                dominated: false,
            })
        })
        .collect();
    let flags = flag_dominated(&pareto.iter().map(|p| (p.miou, p.rmse)).collect::<Vec<_>>(), 0.0);
    for (p, f) in pareto.iter_mut().zip(flags) {
        p.dominated = f;
    }
    Ok(Comparison { baseline, table, curves, pareto })
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `table.csv`, `curves.csv` and, for dense-image runs, `pareto.csv`.
pub fn write_comparison(c: &Comparison, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_csv(&out.join("table.csv"), &c.table)?;
    write_csv(&out.join("curves.csv"), &c.curves)?;
    if !c.pareto.is_empty() {
        write_csv(&out.join("pareto.csv"), &c.pareto)?;
    }
    Ok(())
}

pub fn render_table(c: &Comparison) -> String {
    let mut s = format!("{:<20} {:<8} {:>3} {:>18} {:>10} {:>9}\n", "method", "metric", "n", "mean ± std", "delta", "improv.");
    for r in &c.table {
        let imp = r.improvement_pct.map(|p| format!("{p:+.1}%")).unwrap_or_else(|| "-".into());
        s.push_str(&format!(
            "{:<20} {:<8} {:>3} {:>18} {:>+10.4} {:>9}\n",
            r.method,
            r.metric,
            r.n,
            format!("{:.4} ± {:.4}", r.mean, r.std),
            r.delta,
            imp
        ));
    }
    s.push_str(&format!("(deltas against {})\n", c.baseline));
    s
}
