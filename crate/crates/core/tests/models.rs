//! Learner and designer networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vbpt_autodiff::{GradOptions, Graph, Tensor};
use vbpt_core::data::images::{gen_dense_images, image_tensor, DenseImageSpec};
use vbpt_core::data::vocab;
use vbpt_core::designer::{designer_targets, detached_targets, init_designer, DesignerConfig};
use vbpt_core::eval::{decode_batch, Decode};
use vbpt_core::lm::{init_lm, lm_forward, LmConfig, TokenBatch};
use vbpt_core::mask_designer::{designer_mask, init_mask_designer, MaskDesignerConfig};
use vbpt_core::optim::{Adam, AdamConfig};
use vbpt_core::targets::{candidate_sets, loss_rows, one_hot_targets, pretrain_loss, pretrain_loss_const, LossRows};
use vbpt_core::value::{down_gradient, mask_meta_loss, FeedbackWeights, ParamSubset, VisionDownstream, VisionPretrain};
use vbpt_core::vision::{self, init_heads, init_vision, VisionConfig};
use vbpt_core::{Error, ParamStore};

fn tiny_lm() -> LmConfig {
    LmConfig { vocab: 64, d_model: 16, n_heads: 2, n_layers: 2, d_ff: 32, max_seq: 32 }
}

fn tiny_designer() -> DesignerConfig {
    DesignerConfig { vocab: 64, d_model: 8, n_heads: 2, n_layers: 1, d_ff: 16, max_seq: 32, top_k: 4, alpha_max: 0.5 }
}

fn tiny_vision() -> VisionConfig {
    VisionConfig { channels: 3, height: 8, width: 8, patch: 4, d_model: 8, n_heads: 2, n_layers: 2, d_ff: 16, n_classes: 4 }
}

fn random_rows(rng: &mut ChaCha8Rng, b: usize, t: usize) -> Vec<Vec<u32>> {
    (0..b).map(|_| (0..t).map(|_| rng.random_range(2..64)).collect()).collect()
}

fn logits(cfg: &LmConfig, p: &ParamStore<f64>, batch: &TokenBatch) -> Tensor<f64> {
    let g = Graph::new();
    let b = p.bind(&g, false);
    (*lm_forward(cfg, &g, &b, batch).unwrap().logits.value()).clone()
}

fn all_rows(batch: &TokenBatch) -> LossRows {
    loss_rows(batch, &vec![true; batch.tokens.len()]).unwrap()
}

#[test]
fn zeroed_head_gives_uniform_softmax() {
    let cfg = tiny_lm();
    let mut p = init_lm::<f64>(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    for name in ["head.out.w", "head.out.b"] {
        let t = p.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let batch = TokenBatch::from_rows(&[vec![5]]).unwrap();
    let probs = vbpt_autodiff::softmax_tensor(&logits(&cfg, &p, &batch));
    assert!(probs.data().iter().all(|&x| (x - 1.0 / 64.0).abs() < 1e-15));
}

#[test]
fn batched_forward_equals_per_example_forward() {
    let cfg = tiny_lm();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = init_lm::<f64>(&cfg, &mut rng);
    let rows = random_rows(&mut rng, 3, 10);
    let all = logits(&cfg, &p, &TokenBatch::from_rows(&rows).unwrap());
    let v = cfg.vocab;
    for (b, row) in rows.iter().enumerate() {
        let one = logits(&cfg, &p, &TokenBatch::from_rows(std::slice::from_ref(row)).unwrap());
        let part = &all.data()[b * 10 * v..(b + 1) * 10 * v];
        assert!(part.iter().zip(one.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn packed_segments_do_not_see_each_other() {
    let cfg = tiny_lm();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = init_lm::<f64>(&cfg, &mut rng);
    let a = random_rows(&mut rng, 1, 5).remove(0);
    let b = random_rows(&mut rng, 1, 7).remove(0);
    let packed = TokenBatch {
        tokens: [a.clone(), b.clone()].concat(),
        segments: [vec![1; 5], vec![2; 7]].concat(),
        batch: 1,
        seq: 12,
    };
    let both = logits(&cfg, &p, &packed);
    let alone = logits(&cfg, &p, &TokenBatch::from_rows(&[b]).unwrap());
    let v = cfg.vocab;
    assert!(both.data()[5 * v..].iter().zip(alone.data()).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn forward_rejects_bad_tokens_and_lengths() {
    let cfg = tiny_lm();
    let p = init_lm::<f64>(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let g = Graph::new();
    let b = p.bind(&g, false);
    let bad = TokenBatch::from_rows(&[vec![3, 64]]).unwrap();
    assert!(matches!(lm_forward(&cfg, &g, &b, &bad), Err(Error::TokenOutOfRange { id: 64, vocab: 64 })));
    let long = TokenBatch::from_rows(&[vec![3; 33]]).unwrap();
    assert!(matches!(lm_forward(&cfg, &g, &b, &long), Err(Error::LengthOverflow { len: 33, max: 32 })));
}

#[test]
fn parameter_count_is_a_function_of_the_config() {
    for (d, l) in [(16, 1), (16, 3), (32, 2)] {
        let cfg = LmConfig { d_model: d, n_layers: l, d_ff: 2 * d, ..tiny_lm() };
        let p = init_lm::<f64>(&cfg, &mut ChaCha8Rng::seed_from_u64(d as u64));
        assert_eq!(p.numel(), cfg.param_count());
    }
}

#[test]
fn each_block_is_a_contiguous_named_group() {
    let cfg = tiny_lm();
    let p = init_lm::<f64>(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let layout = p.layout();
    for k in 0..cfg.n_layers {
        let prefix = vbpt_core::lm::block_prefix(k);
        let idx: Vec<usize> = layout.entries().iter().enumerate().filter(|(_, e)| e.name.starts_with(&prefix)).map(|(i, _)| i).collect();
        assert!(!idx.is_empty());
        assert_eq!(idx.last().unwrap() - idx[0] + 1, idx.len());
    }
}

#[test]
fn overfit_single_sequence_then_greedy_decode_reproduces_it() {
    let cfg = LmConfig { d_model: 32, d_ff: 64, ..tiny_lm() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = init_lm::<f64>(&cfg, &mut rng);
    let mut toks = vocab::encode("Question: 12+7?\nAnswer: 19").unwrap();
    toks.push(vocab::EOS);
    let batch = TokenBatch::from_rows(&[toks]).unwrap();
    let rows = all_rows(&batch);
    let mut opt = Adam::new(AdamConfig { lr: 1e-2, warmup_frac: 0.0, cosine: false, weight_decay: 0.0, ..AdamConfig::learner() }, p.numel(), 1000);
    let mut loss = f64::INFINITY;
    for _ in 0..1000 {
        let g = Graph::new();
        let b = p.bind(&g, true);
        let out = lm_forward(&cfg, &g, &b, &batch).unwrap();
        let l = pretrain_loss_const(&g, &out.logits, &rows, one_hot_targets(&rows, cfg.vocab)).unwrap();
        loss = l.item();
        if loss < 1e-3 {
            break;
        }
        let grad = g.backward(&l, &b.param_set(), false).unwrap();
        opt.update(&mut p, &grad).unwrap();
    }
    assert!(loss < 1e-3, "loss {loss}");
    let prompt = vocab::encode("Question: 12+7?\nAnswer:").unwrap();
    let gen = decode_batch(&cfg, &p, &[prompt], 8, Decode::Greedy, &mut rng).unwrap();
    assert_eq!(vocab::decode(&gen[0]), " 19");
}

#[test]
fn gate_stays_in_range_and_mixture_is_exact() {
    let lm = tiny_lm();
    let dc = tiny_designer();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta = init_lm::<f64>(&lm, &mut rng);
    let mut checked = 0;
    while checked < 10_000 {
        let mut phi = init_designer::<f64>(&dc, &mut rng);
        // large gate weights push the sigmoid into both tails
        let scale = rng.random_range(1.0..300.0);
        let w = phi.get_mut("designer.gate.w").unwrap();
        *w = w.map(|x| x * scale);
        let rows_t = random_rows(&mut rng, 4, 24);
        let batch = TokenBatch::from_rows(&rows_t).unwrap();
        let rows = all_rows(&batch);
        let g = Graph::new();
        let pb = phi.bind(&g, false);
        let out = designer_targets(&dc, &g, &pb, &batch, &rows, &logits(&lm, &theta, &batch)).unwrap();
        for st in out.soft_targets(&rows) {
            assert!((0.0..=dc.alpha_max).contains(&st.alpha), "alpha {}", st.alpha);
            let sp: f64 = st.p_phi.iter().sum();
            let sq: f64 = st.q_phi.iter().sum();
            assert!((sp - 1.0).abs() < 1e-9 && (sq - 1.0).abs() < 1e-9);
            assert!(st.p_phi.iter().chain(&st.q_phi).all(|&x| x >= 0.0));
            checked += 1;
        }
        for (n, st) in out.soft_targets(&rows).iter().enumerate() {
            let w = rows.targets[n];
            assert!(st.candidate_ids.contains(&w));
            for (j, &c) in st.candidate_ids.iter().enumerate() {
                let hot = if c == w { 1.0 } else { 0.0 };
                let rebuilt = (1.0 - st.alpha) * hot + st.alpha * st.p_phi[j];
                assert!((rebuilt - st.q_phi[j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn full_support_uniform_scores_and_zero_gate() {
    let lm = tiny_lm();
    let dc = DesignerConfig { top_k: 64, ..tiny_designer() };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let theta = init_lm::<f64>(&lm, &mut rng);
    let mut phi = init_designer::<f64>(&dc, &mut rng);
    for name in ["designer.embed.tok", "designer.score.learner_logit", "designer.gate.w"] {
        let t = phi.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let batch = TokenBatch::from_rows(&random_rows(&mut rng, 2, 8)).unwrap();
    let rows = all_rows(&batch);
    let t = detached_targets(&dc, &phi, &batch, &rows, &logits(&lm, &theta, &batch)).unwrap();
    let q = t.full(64).unwrap();
    let a = dc.alpha_max / 2.0;
    for (n, &w) in rows.targets.iter().enumerate() {
        for c in 0..64 {
            let hot = if c == w as usize { 1.0 } else { 0.0 };
            let expect = (1.0 - a) * hot + a / 64.0;
            assert!((q.data()[n * 64 + c] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn candidate_sets_are_deterministic() {
    let lm = tiny_lm();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let theta = init_lm::<f64>(&lm, &mut rng);
    let batch = TokenBatch::from_rows(&random_rows(&mut rng, 2, 16)).unwrap();
    let rows = all_rows(&batch);
    let a = candidate_sets(&logits(&lm, &theta, &batch), &rows, 5).unwrap();
    let b = candidate_sets(&logits(&lm, &theta, &batch), &rows, 5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn closed_gate_loss_equals_one_hot_loss_exactly() {
    let lm = tiny_lm();
    let dc = DesignerConfig { alpha_max: 0.0, ..tiny_designer() };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let theta = init_lm::<f64>(&lm, &mut rng);
    let phi = init_designer::<f64>(&dc, &mut rng);
    let batch = TokenBatch::from_rows(&random_rows(&mut rng, 2, 16)).unwrap();
    let rows = all_rows(&batch);
    let g = Graph::new();
    let tb = theta.bind(&g, false);
    let out = lm_forward(&lm, &g, &tb, &batch).unwrap();
    let t = detached_targets(&dc, &phi, &batch, &rows, &out.logits.value()).unwrap();
    let soft = pretrain_loss_const(&g, &out.logits, &rows, t.full(64).unwrap()).unwrap().item();
    let hot = pretrain_loss_const(&g, &out.logits, &rows, one_hot_targets(&rows, 64)).unwrap().item();
    assert_eq!(soft.to_bits(), hot.to_bits());
}

#[test]
fn self_targets_give_zero_logit_gradient_on_full_support() {
    let lm = tiny_lm();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let theta = init_lm::<f64>(&lm, &mut rng);
    let batch = TokenBatch::from_rows(&random_rows(&mut rng, 1, 6)).unwrap();
    let rows = all_rows(&batch);
    let g = Graph::new();
    let z = g.param(logits(&lm, &theta, &batch));
    let q = g.constant(vbpt_autodiff::softmax_tensor(&z.value().gather_rows(&rows.rows).unwrap()));
    let loss = pretrain_loss(&z, &rows, &q).unwrap();
    let dz = g.grad(&loss, &[&z], GradOptions::default()).unwrap()[0].clone().unwrap();
    assert!(dz.value().data().iter().all(|x| x.abs() < 1e-15));
}

#[test]
fn learner_loss_carries_no_designer_gradient() {
    let lm = tiny_lm();
    let dc = tiny_designer();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let theta = init_lm::<f64>(&lm, &mut rng);
    let phi = init_designer::<f64>(&dc, &mut rng);
    let batch = TokenBatch::from_rows(&random_rows(&mut rng, 2, 12)).unwrap();
    let rows = all_rows(&batch);
    let g = Graph::new();
    let tb = theta.bind(&g, true);
    let pb = phi.bind(&g, true);
    let out = lm_forward(&lm, &g, &tb, &batch).unwrap();
    let t = detached_targets(&dc, &phi, &batch, &rows, &out.logits.value()).unwrap();
    let loss = pretrain_loss_const(&g, &out.logits, &rows, t.full(64).unwrap()).unwrap();
    let set = pb.param_set();
    let vars: Vec<_> = set.vars().collect();
    let grads = g.grad(&loss, &vars, GradOptions::default().allow_unused()).unwrap();
    assert!(grads.iter().all(Option::is_none));
}

#[test]
fn masks_are_bounded_deterministic_and_half_when_decoder_is_zeroed() {
    let vc = tiny_vision();
    let mc = MaskDesignerConfig::default();
    let spec = DenseImageSpec { height: 8, width: 8, n_unlabeled: 6, n_train_head: 0, n_meta: 0, n_eval: 0, ..Default::default() };
    let task = gen_dense_images(&spec).unwrap();
    let imgs: Vec<_> = task.unlabeled.iter().collect();
    let x = image_tensor::<f64>(&imgs, 8, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut phi = init_mask_designer::<f64>(&mc, &vc, &mut rng);
    let run = |phi: &ParamStore<f64>| {
        let g = Graph::new();
        let pb = phi.bind(&g, false);
        (*designer_mask(&vc, &pb, &g.constant(x.clone())).unwrap().value()).clone()
    };
    let w = phi.get_mut("mask.dec.w").unwrap();
    *w = w.map(|v| v * 50.0);
    let m = run(&phi);
    assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), run(&phi).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    for name in ["mask.dec.w", "mask.dec.b"] {
        let t = phi.get_mut(name).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    assert!(run(&phi).data().iter().all(|&v| v == 0.5));
    let g = Graph::new();
    let pb = phi.bind(&g, false);
    let bad = g.constant(Tensor::zeros(&[1, 3, 4, 8]));
    assert!(matches!(designer_mask(&vc, &pb, &bad), Err(Error::Shape(_))));
}

#[test]
fn all_ones_mask_reduces_to_unmasked_prediction() {
    let vc = tiny_vision();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let theta = init_vision::<f64>(&vc, &mut rng);
    let x = Tensor::new((0..2 * 3 * 64).map(|i| (i as f64 * 0.37).sin()).collect(), &[2, 3, 8, 8]).unwrap();
    let target = vision::target_features(&vc, &theta, &x).unwrap();
    let g = Graph::new();
    let tb = theta.bind(&g, false);
    let xv = g.constant(x.clone());
    let ones = g.constant(Tensor::ones(&[2, 8, 8]));
    let masked = vision::ssl_loss(&vc, &g, &tb, &xv, &ones, &target).unwrap().item();
    // unmasked: encode the clean images, side channel at its all-kept value
    let ctx = vision::encode(&vc, &tb, &xv).unwrap();
    let side = tb.get("pred.mask").unwrap().broadcast_to(&ctx.shape()).unwrap();
    let h = vbpt_core::nn::gelu(&vbpt_core::nn::linear(&tb, "pred.up", &ctx.add(&side).unwrap()).unwrap()).unwrap();
    let pred = vbpt_core::nn::linear(&tb, "pred.down", &h).unwrap();
    let plain = pred.mse(&g.constant(target)).unwrap().item();
    assert!((masked - plain).abs() < 1e-14);
}

#[test]
fn sparsity_regularized_training_drives_mask_mean_to_keep_ratio() {
    let vc = tiny_vision();
    let mc = MaskDesignerConfig::default();
    let spec = DenseImageSpec { height: 8, width: 8, n_unlabeled: 8, n_train_head: 0, n_meta: 4, n_eval: 0, ..Default::default() };
    let task = gen_dense_images(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let theta = init_vision::<f64>(&vc, &mut rng);
    let heads = init_heads::<f64>(&vc, &mut rng);
    let mut phi = init_mask_designer::<f64>(&mc, &vc, &mut rng);
    let imgs: Vec<_> = task.unlabeled.iter().collect();
    let x = image_tensor::<f64>(&imgs, 8, 8);
    let target = vision::target_features(&vc, &theta, &x).unwrap();
    let keep = 0.25;
    let pre = VisionPretrain { cfg: &vc, images: &x, target: &target, lambda_spars: 10.0, lambda_tv: 0.01, keep_ratio: keep };
    let subset = ParamSubset::vision_default(&vc);
    let meta: Vec<_> = task.meta.iter().collect();
    let down = VisionDownstream { cfg: &vc, heads: &heads, images: &meta };
    let g_down = down_gradient(&down, &theta, &FeedbackWeights(
        [("seg".to_string(), 1.0), ("depth".to_string(), 1.0)].into(),
    ))
    .unwrap();
    let (s, _) = subset.split(&theta.layout()).unwrap();
    let g_down = g_down.restrict(&s).unwrap();
    let mut opt = Adam::new(AdamConfig { lr: 1e-2, ..AdamConfig::designer() }, phi.numel(), 500);
    for _ in 0..500 {
        let mg = mask_meta_loss(&pre, &theta, &phi, &subset, &g_down).unwrap();
        opt.update(&mut phi, &mg.grad).unwrap();
    }
    let g = Graph::new();
    let pb = phi.bind(&g, false);
    let mean = designer_mask(&vc, &pb, &g.constant(x)).unwrap().mean().unwrap().item();
    assert!((mean - keep).abs() < 0.05, "mask mean {mean}");
}
