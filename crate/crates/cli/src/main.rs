use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use vbpt_cli::compare::{compare, load_run, render_table, write_comparison};
use vbpt_cli::manifest::{Manifest, ManifestEntry};
use vbpt_cli::{dir_checksum, exit_code, EXIT_OK, EXIT_VERIFY};
use vbpt_core::config::{Method, RunConfig, TaskConfig};
use vbpt_core::data::images::save_image_task;
use vbpt_core::data::language::save_language_task;
use vbpt_core::diagnostics::{check_cadence, compare_overhead, measure_overhead, run_suite, Faults, CHECKS};
use vbpt_core::trainer::sweep::weight_grid;
use vbpt_core::trainer::{config_hash, train, RunStatus, RunSummary, TaskData, TrainOptions};
use vbpt_core::Error;

/// Value-based controlled pretraining experiments.
#[derive(Parser)]
#[command(name = "vbpt", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the task data described by a run config.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing, non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one run into a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        /// Continue from the run directory's latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Print the resolved config and parameter counts, then exit.
        #[arg(long)]
        dry_run: bool,
        /// Stop (with a checkpoint) after this many learner steps.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Train a grid of runs under one experiment root, tracked in manifest.json.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Comma-separated methods; the config's method when empty.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        /// Sweep this many segmentation/depth feedback weightings (images only).
        #[arg(long)]
        pareto: Option<usize>,
    },
    /// Tabulate finished runs: mean ± std per method, curves, Pareto data.
    Compare {
        runs: Vec<PathBuf>,
        /// Method the delta column is measured against.
        #[arg(long)]
        baseline: Option<String>,
        /// Directory for table.csv, curves.csv and pareto.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the theory and harness checks; exits 4 if any fails.
    Verify {
        /// Run only the named checks (repeatable).
        #[arg(long)]
        only: Vec<String>,
        /// Negate every Hessian-vector product inside the checks.
        #[arg(long)]
        inject_hvp_sign_flip: bool,
        /// Write outcomes as CSV here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Measure the value-update overhead of a config against its baseline.
    Overhead {
        #[arg(long)]
        config: PathBuf,
        /// Steps excluded from the measurement window.
        #[arg(long, default_value_t = 20)]
        warmup: u64,
        /// Also measure with the meta period doubled.
        #[arg(long)]
        cadence: bool,
        /// Write the report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(RunConfig::from_toml(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })?)
}

fn parse_method(s: &str) -> Result<Method> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Config(format!("unknown method `{s}`")).into())
}

fn gen(config: &Path, out: &Path, force: bool) -> Result<()> {
    let cfg = read_config(config)?;
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        if !force {
            bail!(Error::Config(format!("{} is not empty; pass --force to replace it", out.display())));
        }
        fs::remove_dir_all(out)?;
    }
    let data = TaskData::for_config(&RunConfig { data_dir: None, ..cfg })?;
    match &data {
        TaskData::Language(t) => {
            save_language_task(t, out)?;
            println!(
                "language task: {} corpus examples ({} removed by decontamination), {} feedback, {} held-out, {} probe",
                t.corpus.len(),
                t.report.removals.len(),
                t.feedback.examples.len(),
                t.heldout.examples.len(),
                t.probe.examples.len()
            );
        }
        TaskData::Vision(t) => {
            save_image_task(t, out)?;
            println!(
                "image task: {} unlabeled, {} head-training, {} meta, {} eval",
                t.unlabeled.len(),
                t.train_head.len(),
                t.meta.len(),
                t.eval.len()
            );
        }
    }
    println!("checksum {}", dir_checksum(out)?);
    Ok(())
}

fn dry_run(cfg: &RunConfig) -> Result<()> {
    print!("{}", cfg.to_toml()?);
    println!("# config hash {}", config_hash(cfg)?);
    match &cfg.task {
        TaskConfig::Language(l) => println!("# learner parameters {}", l.model.param_count()),
        TaskConfig::Vision(v) => {
            let enc = vbpt_core::vision::init_vision::<f64>(&v.model, &mut vbpt_core::rng::stream(cfg.seed, "dry-run"));
            println!("# encoder parameters {}", enc.numel());
        }
    }
    println!("# unlabeled tokens per step {}", cfg.tokens_per_step());
    Ok(())
}

fn train_cmd(config: &Path, run_dir: &Path, resume: bool, dry: bool, stop_after: Option<u64>) -> Result<()> {
    let cfg = read_config(config)?;
    if dry {
        return dry_run(&cfg);
    }
    let data = TaskData::for_config(&cfg)?;
    let out = train(&cfg, &data, Some(run_dir), &TrainOptions { stop_after, resume })?;
    match &out.final_eval {
        Some(e) => println!("finished {} steps; final primary metric {:.4}", out.records.len(), e.primary),
        None => println!("stopped after {} steps; resume with --resume", out.records.last().map_or(0, |r| r.step)),
    }
    Ok(())
}

fn sweep(config: &Path, out: &Path, seeds: &[u64], methods: &[String], pareto: Option<usize>) -> Result<()> {
    let base = read_config(config)?;
    let methods: Vec<Method> = if methods.is_empty() { vec![base.method] } else { methods.iter().map(|m| parse_method(m)).collect::<Result<_>>()? };
    let weights = match pareto {
        Some(_) if !matches!(base.task, TaskConfig::Vision(_)) => bail!(Error::Config("--pareto needs the dense-image task".into())),
        Some(n) => weight_grid(n).into_iter().map(Some).collect(),
        None => vec![None],
    };
    let mut plan = Vec::new();
    for &m in &methods {
        for (k, w) in weights.iter().enumerate() {
            for &seed in seeds {
                let cfg = RunConfig { method: m, seed, feedback_weights: w.clone().or(base.feedback_weights.clone()), ..base.clone() };
                cfg.validate()?;
                let id = match w {
                    Some(_) => format!("{}-w{k}-s{seed}", m.name()),
                    None => format!("{}-s{seed}", m.name()),
                };
                plan.push((id, cfg));
            }
        }
    }
    let mut manifest = Manifest::load(out)?;
    manifest.refresh(out)?;
    for (id, cfg) in &plan {
        if manifest.get(id).is_none() {
            manifest.upsert(ManifestEntry {
                id: id.clone(),
                path: PathBuf::from(id),
                method: cfg.method.name().to_string(),
                seed: cfg.seed,
                config_hash: config_hash(cfg)?,
                status: RunStatus::Pending,
            });
        }
    }
    manifest.save(out)?;
    let data = TaskData::for_config(&base)?;
    let mut failed = 0;
    for (id, cfg) in &plan {
        let dir = out.join(id);
        let entry = manifest.get(id).cloned().expect("planned");
        if entry.status == RunStatus::Done {
            log::info!("{id} already done");
            continue;
        }
        if entry.config_hash != config_hash(cfg)? {
            bail!(Error::Config(format!("{id} was planned with a different config")));
        }
        let resume = RunSummary::load(&dir).is_ok();
        manifest.upsert(ManifestEntry { status: RunStatus::Running, ..entry.clone() });
        manifest.save(out)?;
        let status = match train(cfg, &data, Some(&dir), &TrainOptions { stop_after: None, resume }) {
            Ok(_) => RunStatus::Done,
            Err(e) => {
                eprintln!("{id}: {e}");
                failed += 1;
                RunStatus::Failed
            }
        };
        manifest.upsert(ManifestEntry { status, ..entry });
        manifest.save(out)?;
        println!("{id}: {status:?}");
    }
    let problems = manifest.verify(out);
    for p in &problems {
        eprintln!("manifest: {p}");
    }
    let done: Vec<PathBuf> = manifest.runs.iter().filter(|r| r.status == RunStatus::Done).map(|r| out.join(&r.path)).collect();
    if !done.is_empty() {
        let runs = done.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
        let c = compare(&runs, None)?;
        write_comparison(&c, &out.join("compare"))?;
        print!("{}", render_table(&c));
    }
    if failed > 0 || !problems.is_empty() {
        bail!("{failed} of {} runs failed; {} manifest problems", plan.len(), problems.len());
    }
    Ok(())
}

fn compare_cmd(runs: &[PathBuf], baseline: Option<&str>, out: Option<&Path>) -> Result<()> {
    if runs.is_empty() {
        bail!(Error::Config("give at least one run directory".into()));
    }
    let infos = runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    let c = compare(&infos, baseline)?;
    print!("{}", render_table(&c));
    if let Some(o) = out {
        write_comparison(&c, o)?;
    }
    Ok(())
}

fn verify(only: &[String], flip: bool, report: Option<&Path>) -> Result<i32> {
    for n in only {
        if !CHECKS.contains(&n.as_str()) {
            bail!(Error::Config(format!("unknown check `{n}`; known: {}", CHECKS.join(", "))));
        }
    }
    let outcomes = run_suite(only, Faults { hvp_sign_flip: flip })?;
    for o in &outcomes {
        println!("{} {:<22} {:>7.1}s  {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.seconds, o.detail);
    }
    if let Some(p) = report {
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(["check", "passed", "seconds", "detail"])?;
        for o in &outcomes {
            w.write_record([o.name.clone(), o.passed.to_string(), format!("{:.3}", o.seconds), o.detail.clone()])?;
        }
        w.flush()?;
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_VERIFY })
}

fn overhead(config: &Path, warmup: u64, cadence: bool, out: Option<&Path>) -> Result<()> {
    let cfg = read_config(config)?;
    if !cfg.method.has_meta_steps() {
        bail!(Error::Config(format!("method `{}` runs no value updates", cfg.method.name())));
    }
    let data = TaskData::for_config(&cfg)?;
    let baseline = RunConfig { method: Method::BaselineNtp, ..cfg.clone() };
    let cmp = compare_overhead(measure_overhead(&cfg, &data, warmup)?, measure_overhead(&baseline, &data, warmup)?);
    println!("{:<14} {:>12} {:>14} {:>14} {:>10}", "method", "tokens/s", "step time (s)", "peak memory", "value frac");
    for r in [&cmp.value, &cmp.baseline] {
        println!("{:<14} {:>12.1} {:>14.5} {:>14} {:>10.4}", r.method, r.tokens_per_s, r.mean_step_time, r.peak_memory_bytes, r.value_fraction);
    }
    println!(
        "throughput {:+.1}%, step time {:+.1}%, peak memory x{:.2}",
        100.0 * cmp.throughput_change,
        100.0 * cmp.step_time_inflation,
        cmp.memory_ratio
    );
    let cad = if cadence {
        let c = check_cadence(&cfg, &data, warmup)?;
        println!("meta period {} -> {}: value fraction {:.4} -> {:.4} (ratio {:.2})", c.period, 2 * c.period, c.fraction, c.doubled_fraction, c.ratio);
        Some(c)
    } else {
        None
    };
    if let Some(p) = out {
        fs::write(p, serde_json::to_vec_pretty(&serde_json::json!({ "comparison": cmp, "cadence": cad }))?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Gen { config, out, force } => gen(&config, &out, force)?,
        Cmd::Train { config, run_dir, resume, dry_run, stop_after } => train_cmd(&config, &run_dir, resume, dry_run, stop_after)?,
        Cmd::Sweep { config, out, seeds, methods, pareto } => sweep(&config, &out, &seeds, &methods, pareto)?,
        Cmd::Compare { runs, baseline, out } => compare_cmd(&runs, baseline.as_deref(), out.as_deref())?,
        Cmd::Verify { only, inject_hvp_sign_flip, report } => return verify(&only, inject_hvp_sign_flip, report.as_deref()),
        Cmd::Overhead { config, warmup, cadence, out } => overhead(&config, warmup, cadence, out.as_deref())?,
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { vbpt_cli::EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
