//! Acceptance criteria, one test each. Every test writes a single
//! `ACCEPTANCE <n> PASS|FAIL <name>: <detail>` line straight to stderr so the
//! verdicts stay visible under captured test output.

use std::io::Write;
use std::time::Instant;

use vbpt_core::config::{Method, RunConfig};
use vbpt_core::diagnostics::{run_ablation, run_check, Faults};
use vbpt_core::presets::{arithmetic_ablation, dense_pareto};
use vbpt_core::trainer::sweep::{pareto_sweep, weight_grid};
use vbpt_core::trainer::TaskData;

/// Relative slack within which a corner counts as tied with the best swept
/// point on its own metric.
const PARETO_TIE: f64 = 0.01;

fn report(n: usize, name: &str, passed: bool, detail: &str) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "ACCEPTANCE {n:>2} {verdict} {name}: {detail}");
    assert!(passed, "criterion {n} ({name}) failed: {detail}");
}

/// Runs a named verification check, adding a wall-clock limit when one is
/// stated.
fn suite_check(n: usize, check: &str, limit_s: Option<f64>) {
    let o = run_check(check, Faults::none()).unwrap();
    let in_time = limit_s.is_none_or(|l| o.seconds < l);
    let limit = limit_s.map(|l| format!(" (limit {l:.0}s)")).unwrap_or_default();
    report(n, check, o.passed && in_time, &format!("{}; {:.1}s{limit}", o.detail, o.seconds));
}

#[test]
fn criterion_01_descent_bound() {
    suite_check(1, "descent_bound", Some(30.0));
}

#[test]
fn criterion_02_first_order_surrogate() {
    suite_check(2, "surrogate_slope", Some(120.0));
}

#[test]
fn criterion_03_unbiased_value_estimate() {
    suite_check(3, "unbiasedness", Some(120.0));
}

#[test]
fn criterion_04_meta_gradient_matches_finite_differences() {
    suite_check(4, "meta_gradient", Some(60.0));
}

#[test]
fn criterion_05_zero_alpha_equals_baseline() {
    suite_check(5, "baseline_equivalence", None);
}

#[test]
fn criterion_06_probe_correlation() {
    suite_check(6, "probe_correlation", None);
}

#[test]
fn criterion_07_ablation_ordering() {
    let t0 = Instant::now();
    let seeds: Vec<u64> = (0..5).collect();
    let methods = [Method::Value, Method::RandomFeedback, Method::UniformSmoothing];
    let rep = run_ablation(&arithmetic_ablation(Method::Value, 0), &methods, &seeds, None).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let arms = rep.arms.iter().map(|a| format!("{} {:.3} ± {:.3}", a.method, a.mean, a.std)).collect::<Vec<_>>().join(", ");
    let effects = rep
        .effects
        .iter()
        .map(|e| format!("vs {} {:+.3} (d = {})", e.against, e.mean_diff, e.cohens_d.map(|d| format!("{d:.2}")).unwrap_or_else(|| "n/a".into())))
        .collect::<Vec<_>>()
        .join(", ");
    let passed = rep.reference_wins() && rep.effects.len() == 2 && secs < 30.0 * 60.0;
    report(7, "ablation_ordering", passed, &format!("held-out pass@1 over {} seeds: {arms}; {effects}; {:.0}s (limit 1800s)", seeds.len(), secs));
}

#[test]
fn criterion_08_pareto_corners() {
    let grid = weight_grid(3);
    let seeds = [0u64, 1, 2];
    let mut miou = vec![0.0; grid.len()];
    let mut rmse = vec![0.0; grid.len()];
    for &s in &seeds {
        let cfg: RunConfig = dense_pareto(Method::Value, s);
        let data = TaskData::for_config(&cfg).unwrap();
        for (k, row) in pareto_sweep(&cfg, &data, &grid, None).unwrap().into_iter().enumerate() {
            miou[k] += row.miou / seeds.len() as f64;
            rmse[k] += row.rmse / seeds.len() as f64;
        }
    }
    let best_miou = miou.iter().copied().fold(f64::MIN, f64::max);
    let best_rmse = rmse.iter().copied().fold(f64::MAX, f64::min);
    let seg_ok = miou[0] >= best_miou * (1.0 - PARETO_TIE);
    let depth_ok = rmse[grid.len() - 1] <= best_rmse * (1.0 + PARETO_TIE);
    let points = (0..grid.len()).map(|k| format!("({:.1}, {:.1}) → mIoU {:.4}, RMSE {:.4}", 1.0 - k as f64 / 2.0, k as f64 / 2.0, miou[k], rmse[k])).collect::<Vec<_>>().join("; ");
    report(
        8,
        "pareto_corners",
        seg_ok && depth_ok,
        &format!("mean over {} seeds: {points}; seg corner best-or-tied {seg_ok}, depth corner best-or-tied {depth_ok} (tie {:.0}%)", seeds.len(), 100.0 * PARETO_TIE),
    );
}

#[test]
fn criterion_09_regularizer_identities() {
    suite_check(9, "regularizers", None);
}

#[test]
fn criterion_10_overhead_accounting() {
    suite_check(10, "overhead", None);
}

#[test]
fn criterion_11_decontamination() {
    suite_check(11, "decontamination", None);
}
