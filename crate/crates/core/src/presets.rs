//! Small ready-made run configurations: the toy arithmetic task and the
//! procedural dense-image task at sizes that train in seconds on one CPU.

use crate::config::{HeadTraining, LanguageRun, Method, RunConfig, TaskConfig, VisionRun};
use crate::data::images::DenseImageSpec;
use crate::data::language::{DownstreamSpec, LanguageTaskSpec};
use crate::data::text::{Grammar, Op, TextCorpusSpec};
use crate::designer::DesignerConfig;
use crate::lm::LmConfig;
use crate::optim::AdamConfig;
use crate::vision::VisionConfig;

/// Single-digit addition.
pub fn small_grammar() -> Grammar {
    Grammar { operand_min: 0, operand_max: 9, operators: vec![Op::Add], word_problem_frac: 0.0 }
}

pub fn tiny_language_run() -> LanguageRun {
    LanguageRun {
        data: LanguageTaskSpec {
            seed: 3,
            seq_len: 32,
            corpus: TextCorpusSpec { seed: 3, n_examples: 200, grammar: small_grammar() },
            downstream: DownstreamSpec { grammar: small_grammar(), n_feedback: 16, n_heldout: 16, n_probe: 16 },
            ..LanguageTaskSpec::default()
        },
        model: LmConfig { vocab: 64, d_model: 16, n_heads: 2, n_layers: 2, d_ff: 32, max_seq: 32 },
        designer: DesignerConfig { vocab: 64, d_model: 8, n_heads: 2, n_layers: 0, d_ff: 8, max_seq: 32, top_k: 4, alpha_max: 0.5 },
        ..LanguageRun::default()
    }
}

pub fn tiny_language(method: Method, seed: u64, steps: u64) -> RunConfig {
    RunConfig {
        seed,
        method,
        steps,
        batch_size: 2,
        grad_accum: 1,
        learner_optim: AdamConfig::learner(),
        designer_optim: AdamConfig::designer(),
        meta_period: 2,
        burn_in: Some(2),
        subset: None,
        feedback_weights: None,
        feedback_batch: 4,
        eval_every: 0,
        checkpoint_every: 0,
        probe: None,
        precision: Default::default(),
        data_dir: None,
        task: TaskConfig::Language(tiny_language_run()),
    }
}

pub fn tiny_vision_run() -> VisionRun {
    VisionRun {
        data: DenseImageSpec {
            seed: 5,
            height: 8,
            width: 8,
            n_classes: 3,
            max_shapes: 2,
            n_unlabeled: 32,
            n_train_head: 16,
            n_meta: 8,
            n_eval: 8,
            ..DenseImageSpec::default()
        },
        model: VisionConfig { channels: 3, height: 8, width: 8, patch: 4, d_model: 8, n_heads: 2, n_layers: 2, d_ff: 16, n_classes: 3 },
        refresh: HeadTraining { steps: 2, lr: 1e-2, batch: 4 },
        eval_heads: HeadTraining { steps: 20, lr: 1e-2, batch: 8 },
        ..VisionRun::default()
    }
}

pub fn tiny_vision(method: Method, seed: u64, steps: u64) -> RunConfig {
    RunConfig { task: TaskConfig::Vision(tiny_vision_run()), ..tiny_language(method, seed, steps) }
}

/// Two-operand addition up to 19 with a model large enough to learn it in
/// 1500 steps; the setting used to compare feedback arms.
pub fn arithmetic_ablation(method: Method, seed: u64) -> RunConfig {
    let grammar = Grammar { operand_max: 19, ..small_grammar() };
    let mut run = tiny_language_run();
    run.data.corpus = TextCorpusSpec { seed: 3, n_examples: 2000, grammar: grammar.clone() };
    run.data.downstream = DownstreamSpec { grammar, n_feedback: 32, n_heldout: 64, n_probe: 16 };
    run.model = LmConfig { d_model: 32, n_heads: 4, d_ff: 64, ..run.model };
    RunConfig {
        batch_size: 8,
        meta_period: 4,
        burn_in: Some(150),
        feedback_batch: 8,
        task: TaskConfig::Language(run),
        ..tiny_language(method, seed, 1500)
    }
}

/// 16×16 dense-image task with enough head training for stable mIoU and
/// RMSE; the base of feedback-weight sweeps.
pub fn dense_pareto(method: Method, seed: u64) -> RunConfig {
    let mut run = tiny_vision_run();
    run.data = DenseImageSpec { height: 16, width: 16, n_unlabeled: 256, n_train_head: 64, n_meta: 32, n_eval: 64, ..run.data };
    run.model = VisionConfig { height: 16, width: 16, d_ff: 32, ..run.model };
    run.refresh = HeadTraining { steps: 20, lr: 0.03, batch: 4 };
    run.eval_heads = HeadTraining { steps: 400, lr: 0.03, batch: 8 };
    RunConfig {
        batch_size: 8,
        meta_period: 4,
        burn_in: Some(30),
        feedback_batch: 8,
        task: TaskConfig::Vision(run),
        ..tiny_language(method, seed, 300)
    }
}
