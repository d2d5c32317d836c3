mod common;

use std::collections::HashSet;

use common::{tiny_language, tiny_vision, tiny_vision_run};
use vbpt_core::config::{HeadTraining, Method, ProbeConfig, TaskConfig};
use vbpt_core::data::images::gen_dense_images;
use vbpt_core::designer::init_designer;
use vbpt_core::rng;
use vbpt_core::trainer::{
    check_label_firewall, is_meta_step, read_metrics, refresh_eval_heads, AuditRecord, BatchRole, RunStatus, RunSummary, TaskData, TrainOptions,
    train,
};
use vbpt_core::vision::{init_heads, init_vision};
use vbpt_core::{Error, ParamStore};

fn data(cfg: &vbpt_core::config::RunConfig) -> TaskData {
    TaskData::for_config(cfg).unwrap()
}

fn untimed(out: &vbpt_core::trainer::TrainOutput) -> Vec<vbpt_core::trainer::MetricsRecord> {
    out.records.iter().map(|r| r.untimed()).collect()
}

#[test]
fn baseline_runs_are_deterministic() {
    let cfg = tiny_language(Method::BaselineNtp, 7, 100);
    let d = data(&cfg);
    let a = train(&cfg, &d, None, &TrainOptions::default()).unwrap();
    let b = train(&cfg, &d, None, &TrainOptions::default()).unwrap();
    assert_eq!(a.records.len(), 100);
    assert_eq!(untimed(&a), untimed(&b));
    assert_eq!(a.theta_checksum, b.theta_checksum);
    assert!(a.final_eval.is_some());
}

#[test]
fn zero_gate_value_run_matches_baseline() {
    let base = tiny_language(Method::BaselineNtp, 7, 100);
    let mut value = tiny_language(Method::Value, 7, 100);
    if let TaskConfig::Language(l) = &mut value.task {
        l.designer.alpha_max = 0.0;
    }
    assert!(base.compute_matched(&value).is_ok());
    let d = data(&base);
    let a = train(&base, &d, None, &TrainOptions::default()).unwrap();
    let b = train(&value, &d, None, &TrainOptions::default()).unwrap();
    assert!(b.designer_updates > 0);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert!((x.l_pre - y.l_pre).abs() <= 1e-9, "step {}: {} vs {}", x.step, x.l_pre, y.l_pre);
    }
    assert_eq!(a.theta_checksum, b.theta_checksum);
}

#[test]
fn full_burn_in_never_touches_the_designer() {
    let mut cfg = tiny_language(Method::Value, 1, 12);
    cfg.burn_in = Some(12);
    let out = train(&cfg, &data(&cfg), None, &TrainOptions::default()).unwrap();
    let TaskConfig::Language(l) = &cfg.task else { unreachable!() };
    let phi0: ParamStore<f64> = init_designer(&l.designer, &mut rng::stream(1, "init.designer"));
    assert_eq!(out.designer_updates, 0);
    assert_eq!(out.phi_checksum, phi0.checksum());
    assert!(out.records.iter().all(|r| !r.meta_step));
}

#[test]
fn meta_steps_follow_burn_in_and_period() {
    let mut cfg = tiny_language(Method::Value, 1, 20);
    cfg.burn_in = Some(5);
    cfg.meta_period = 3;
    let steps: Vec<u64> = (0..20).filter(|&s| is_meta_step(&cfg, s)).collect();
    assert_eq!(steps, vec![5, 8, 11, 14, 17]);
    cfg.method = Method::BaselineNtp;
    assert!((0..20).all(|s| !is_meta_step(&cfg, s)));
}

#[test]
fn value_run_reports_alignment_and_respects_the_firewall() {
    let mut cfg = tiny_language(Method::Value, 2, 10);
    cfg.probe = Some(ProbeConfig { every: 3, eta: 1e-2, batch: 4 });
    let TaskData::Language(task) = data(&cfg) else { unreachable!() };
    let out = train(&cfg, &TaskData::Language(task.clone()), None, &TrainOptions::default()).unwrap();
    let metas: Vec<_> = out.records.iter().filter(|r| r.meta_step).collect();
    assert_eq!(metas.len(), 4);
    for r in &metas {
        let v = r.value.as_ref().unwrap();
        assert!(v.bound_holds());
        assert!(v.unbiased);
        assert_eq!(r.v, Some(v.v));
        assert!((v.predicted_improvement - v.eta * v.v).abs() < 1e-15);
        assert!(r.designer_stat.unwrap() > 0.0 && r.designer_stat.unwrap() < 0.5);
    }
    assert_eq!(out.probes.len(), 4);
    assert!(out.probes.iter().all(|p| p.predicted.is_finite() && p.realized.is_finite()));

    let labeled: HashSet<u64> = task.labeled().map(|e| e.id).collect();
    check_label_firewall(&out.audit, &labeled).unwrap();
    assert!(out.audit.iter().any(|a| a.role == BatchRole::Feedback && a.ids.iter().all(|i| labeled.contains(i))));
    let leak = vec![AuditRecord { step: 0, role: BatchRole::Pretrain, ids: vec![*labeled.iter().next().unwrap()] }];
    assert!(check_label_firewall(&leak, &labeled).is_err());
}

#[test]
fn matched_runs_share_learner_schedule_and_token_counts() {
    let mut cfg = tiny_language(Method::BaselineNtp, 4, 8);
    cfg.grad_accum = 2;
    let d = data(&cfg);
    let runs: Vec<_> = [Method::BaselineNtp, Method::Value, Method::RandomFeedback, Method::UniformSmoothing, Method::SelfDistillation]
        .into_iter()
        .map(|m| {
            let c = vbpt_core::config::RunConfig { method: m, ..cfg.clone() };
            assert!(cfg.compute_matched(&c).is_ok());
            train(&c, &d, None, &TrainOptions::default()).unwrap()
        })
        .collect();
    for out in &runs {
        assert_eq!(out.records.len(), 8);
        for (r, b) in out.records.iter().zip(&runs[0].records) {
            assert_eq!(r.tokens, r.step * 2 * 32 * 2);
            assert_eq!(r.lr, b.lr);
        }
        let pre_batches = out.audit.iter().filter(|a| a.role == BatchRole::Pretrain).count();
        assert_eq!(pre_batches, 16);
    }
    assert!(runs[2].designer_updates > 0);
    assert!(runs[2].records.iter().any(|r| r.v.is_some()));
}

#[test]
fn interrupted_run_resumes_bit_identically() {
    let mut cfg = tiny_language(Method::Value, 9, 12);
    cfg.eval_every = 4;
    let d = data(&cfg);
    let tmp = tempfile::tempdir().unwrap();
    let (full_dir, part_dir) = (tmp.path().join("full"), tmp.path().join("part"));
    let full = train(&cfg, &d, Some(&full_dir), &TrainOptions::default()).unwrap();

    let first = train(&cfg, &d, Some(&part_dir), &TrainOptions { stop_after: Some(5), resume: false }).unwrap();
    assert!(!first.finished);
    assert_eq!(RunSummary::load(&part_dir).unwrap().status, RunStatus::Pending);
    let rest = train(&cfg, &d, Some(&part_dir), &TrainOptions { stop_after: None, resume: true }).unwrap();
    assert!(rest.finished);
    assert_eq!(untimed(&rest), untimed(&full));
    assert_eq!(rest.theta_checksum, full.theta_checksum);
    assert_eq!(rest.phi_checksum, full.phi_checksum);
    assert_eq!(rest.final_eval, full.final_eval);
    let on_disk: Vec<_> = read_metrics(&part_dir).unwrap().iter().map(|r| r.untimed()).collect();
    assert_eq!(on_disk, untimed(&full));
    assert_eq!(RunSummary::load(&part_dir).unwrap().status, RunStatus::Done);

    let best: Vec<f64> = full.records.iter().filter_map(|r| r.best_so_far).collect();
    let raw: Vec<f64> = full.records.iter().filter_map(|r| r.eval).collect();
    assert_eq!(raw.len(), 3);
    let mut m = f64::NEG_INFINITY;
    for (b, r) in best.iter().zip(&raw) {
        m = m.max(*r);
        assert_eq!(*b, m);
    }
}

#[test]
fn run_directories_are_exclusive_and_not_overwritten() {
    let cfg = tiny_language(Method::BaselineNtp, 1, 2);
    let d = data(&cfg);
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("lock"), "").unwrap();
    assert!(matches!(train(&cfg, &d, Some(tmp.path()), &TrainOptions::default()), Err(Error::Config(_))));
    std::fs::remove_file(tmp.path().join("lock")).unwrap();
    train(&cfg, &d, Some(tmp.path()), &TrainOptions::default()).unwrap();
    assert!(!tmp.path().join("lock").exists());
    assert!(train(&cfg, &d, Some(tmp.path()), &TrainOptions::default()).is_err());
    let header = std::fs::read_to_string(tmp.path().join("metrics.csv")).unwrap();
    assert!(header.starts_with("step,tokens,l_pre,lr,grad_norm,meta_step,v,eta_v"));
}

#[test]
fn divergence_aborts_with_a_state_dump() {
    let mut cfg = tiny_language(Method::BaselineNtp, 1, 30);
    cfg.learner_optim.lr = 1e300;
    cfg.learner_optim.warmup_frac = 0.0;
    cfg.learner_optim.grad_clip = 0.0;
    let tmp = tempfile::tempdir().unwrap();
    let err = train(&cfg, &data(&cfg), Some(tmp.path()), &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    assert_eq!(RunSummary::load(tmp.path()).unwrap().status, RunStatus::Failed);
    assert!(tmp.path().join("checkpoints/diverged.ckpt").exists());
}

#[test]
fn vision_value_run_logs_bounded_alignment() {
    let cfg = tiny_vision(Method::Value, 3, 6);
    let TaskData::Vision(task) = data(&cfg) else { unreachable!() };
    let out = train(&cfg, &TaskData::Vision(task.clone()), None, &TrainOptions::default()).unwrap();
    assert_eq!(out.designer_updates, 2);
    for r in out.records.iter().filter(|r| r.meta_step) {
        let v = r.value.as_ref().unwrap();
        assert!(v.bound_holds());
        assert!(r.meta_loss.is_some());
    }
    let e = out.final_eval.unwrap();
    assert!((0.0..=1.0).contains(&e.primary));
    assert!(e.secondary.unwrap() > 0.0);
    let labeled: HashSet<u64> = task.train_head.iter().chain(&task.meta).chain(&task.eval).map(|i| i.index as u64).collect();
    check_label_firewall(&out.audit, &labeled).unwrap();

    let base = tiny_vision(Method::BaselineNtp, 3, 6);
    let a = train(&base, &TaskData::Vision(task.clone()), None, &TrainOptions::default()).unwrap();
    let b = train(&base, &TaskData::Vision(task), None, &TrainOptions::default()).unwrap();
    assert_eq!(untimed(&a), untimed(&b));
    assert_eq!(a.designer_updates, 0);
}

#[test]
fn head_refresh_freezes_the_backbone() {
    let run = tiny_vision_run();
    let task = gen_dense_images(&run.data).unwrap();
    let theta: ParamStore<f64> = init_vision(&run.model, &mut rng::stream(0, "theta"));
    let sum = theta.checksum();
    let heads0: ParamStore<f64> = init_heads(&run.model, &mut rng::stream(0, "heads"));

    let mut h = heads0.clone();
    let none = HeadTraining { steps: 0, ..run.refresh.clone() };
    assert!(refresh_eval_heads(&run.model, &theta, &mut h, &task.train_head, &none, &mut rng::stream(0, "r")).unwrap().is_empty());
    assert_eq!(h, heads0);

    let training = HeadTraining { steps: 30, lr: 1e-2, batch: 4 };
    let mut drops = Vec::new();
    for seed in 0..10 {
        let mut h = heads0.clone();
        let losses = refresh_eval_heads(&run.model, &theta, &mut h, &task.train_head, &training, &mut rng::stream(seed, "r")).unwrap();
        let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = losses[losses.len() - 5..].iter().sum::<f64>() / 5.0;
        drops.push(head - tail);
    }
    drops.sort_by(f64::total_cmp);
    assert!(drops[5] > 0.0, "{drops:?}");
    assert_eq!(theta.checksum(), sum);
}

#[test]
fn single_precision_runs_end_to_end() {
    let mut cfg = tiny_language(Method::Value, 1, 6);
    cfg.precision = vbpt_core::config::Precision::F32;
    let out = train(&cfg, &data(&cfg), None, &TrainOptions::default()).unwrap();
    assert!(out.records.iter().all(|r| r.l_pre.is_finite()));
    assert!(out.designer_updates > 0);
}
