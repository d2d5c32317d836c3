//! Steady-state throughput and the share of wall-clock time spent on value
//! updates, from per-step timings.

use serde::{Deserialize, Serialize};
use vbpt_autodiff::memory;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::trainer::{train, MetricsRecord, TaskData, TrainOptions};

pub const MIN_META_UPDATES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub method: String,
    pub tokens_per_s: f64,
    pub mean_step_time: f64,
    /// Autodiff allocator high-water mark over the whole run.
    pub peak_memory_bytes: usize,
    /// Σ value-update time / Σ step time inside the window.
    pub value_fraction: f64,
    pub warmup: u64,
    pub window: u64,
    pub meta_updates: usize,
}

/// Summarizes the steps after the first `warmup`. A window holding designer
/// updates must hold at least [`MIN_META_UPDATES`] of them.
pub fn overhead_from_records(method: &str, records: &[MetricsRecord], warmup: u64, peak_memory_bytes: usize) -> Result<OverheadReport> {
    let window: Vec<&MetricsRecord> = records.iter().filter(|r| r.step > warmup).collect();
    if window.is_empty() {
        return Err(Error::Insufficient(format!("no steps after a warmup of {warmup}")));
    }
    let meta_updates = window.iter().filter(|r| r.meta_step).count();
    if meta_updates > 0 && meta_updates < MIN_META_UPDATES {
        return Err(Error::Insufficient(format!(
            "measurement window holds {meta_updates} designer updates, at least {MIN_META_UPDATES} needed"
        )));
    }
    let total: f64 = window.iter().map(|r| r.step_time).sum();
    let value: f64 = window.iter().map(|r| r.value_time).sum();
    let before = records.iter().filter(|r| r.step <= warmup).map(|r| r.tokens).max().unwrap_or(0);
    let tokens = window.iter().map(|r| r.tokens).max().unwrap_or(0) - before;
    if total <= 0.0 {
        return Err(Error::Insufficient("measurement window has zero duration".into()));
    }
    Ok(OverheadReport {
        method: method.to_string(),
        tokens_per_s: tokens as f64 / total,
        mean_step_time: total / window.len() as f64,
        peak_memory_bytes,
        value_fraction: (value / total).clamp(0.0, 1.0),
        warmup,
        window: window.len() as u64,
        meta_updates,
    })
}

/// Trains `cfg` in memory and reports on the steps after `warmup`.
pub fn measure_overhead(cfg: &RunConfig, data: &TaskData, warmup: u64) -> Result<OverheadReport> {
    memory::reset_peak();
    let out = train(cfg, data, None, &TrainOptions::default())?;
    overhead_from_records(cfg.method.name(), &out.records, warmup, memory::peak_bytes())
}

/// Value run relative to a baseline on identical settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadComparison {
    pub value: OverheadReport,
    pub baseline: OverheadReport,
    /// `tokens/s(value) / tokens/s(baseline) − 1`.
    pub throughput_change: f64,
    /// `step time(value) / step time(baseline) − 1`.
    pub step_time_inflation: f64,
    pub memory_ratio: f64,
}

pub fn compare_overhead(value: OverheadReport, baseline: OverheadReport) -> OverheadComparison {
    OverheadComparison {
        throughput_change: value.tokens_per_s / baseline.tokens_per_s - 1.0,
        step_time_inflation: value.mean_step_time / baseline.mean_step_time - 1.0,
        memory_ratio: value.peak_memory_bytes as f64 / baseline.peak_memory_bytes.max(1) as f64,
        value,
        baseline,
    }
}

/// Value fraction at meta period `k` and `2k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CadenceReport {
    pub period: u64,
    pub fraction: f64,
    pub doubled_fraction: f64,
    pub ratio: f64,
}

impl CadenceReport {
    /// Doubling the period halves the fraction to within 30%.
    pub fn passed(&self) -> bool {
        (0.35..=0.65).contains(&self.ratio)
    }
}

pub fn check_cadence(cfg: &RunConfig, data: &TaskData, warmup: u64) -> Result<CadenceReport> {
    let a = measure_overhead(cfg, data, warmup)?;
    let mut doubled = cfg.clone();
    doubled.meta_period *= 2;
    let b = measure_overhead(&doubled, data, warmup)?;
    if a.value_fraction <= 0.0 {
        return Err(Error::Insufficient("no value-update time recorded".into()));
    }
    Ok(CadenceReport {
        period: cfg.meta_period,
        fraction: a.value_fraction,
        doubled_fraction: b.value_fraction,
        ratio: b.value_fraction / a.value_fraction,
    })
}
