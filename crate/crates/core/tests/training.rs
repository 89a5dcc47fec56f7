mod support;

use support::*;
use xbm_core::decoding::{DecoderScorer, StepModel};
use xbm_core::nn::text::Vocabulary;
use xbm_core::nn::*;
use xbm_core::rng::Rng;
use xbm_core::training::*;
use xbm_core::worldgen::{Example, SceneSpec};
use xbm_core::Graph;

/// Two fixed next-token distributions, one per model, over two tokens.
struct Bernoulli(f64);

impl StepModel for Bernoulli {
    type State = usize;
    fn vocab_size(&self) -> usize {
        2
    }
    fn start(&self) -> xbm_core::Result<usize> {
        Ok(1)
    }
    fn advance(&self, s: &mut usize, tokens: &[usize]) -> xbm_core::Result<Vec<Vec<f64>>> {
        *s = tokens.len();
        Ok(vec![vec![self.0.ln(), (1.0 - self.0).ln()]; tokens.len()])
    }
    fn reorder(&self, s: &mut usize, rows: &[usize]) -> xbm_core::Result<()> {
        *s = rows.len();
        Ok(())
    }
}

#[test]
fn kl_matches_bernoulli_closed_form() {
    let (p, q): (f64, f64) = (0.3, 0.8);
    let expected = q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln();
    let kl = kl_exact(&Bernoulli(p), &Bernoulli(q), 0, 1).unwrap();
    assert!((kl - expected).abs() < 1e-12);
}

#[test]
fn kl_is_zero_on_itself_and_never_negative() {
    for seed in 0..100 {
        let (a, img) = tiny_decoder(seed, 4, 3);
        let (b, _) = tiny_decoder(seed + 500, 4, 3);
        let sa = DecoderScorer::new(&a, img.clone());
        let sb = DecoderScorer::new(&b, img);
        assert!(kl_exact(&sa, &sb, 1, 3).unwrap() >= 0.0);
        if seed < 5 {
            assert!(kl_exact(&sa, &sa, 1, 3).unwrap().abs() < 1e-9);
        }
    }
    let (big, img) = tiny_decoder(0, 40, 4);
    let s = DecoderScorer::new(&big, img);
    assert!(kl_exact(&s, &s, 1, 4).is_err());
}

#[test]
fn sequence_distillation_lowers_the_exact_kl() {
    for seed in 0..10 {
        let (before, after) = distill_kl(seed, 4, 3, 100, DISTILL_LR);
        assert!(after < before, "init {seed}: {before} -> {after}");
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        depth: 1,
        heads: 2,
        mlp_hidden: 32,
        max_len: 8,
        ..ModelConfig::default()
    }
}

fn images(n: usize) -> Vec<Example> {
    let spec = SceneSpec::default();
    let vocab = Vocabulary::standard();
    (0..n as u64).map(|i| Example::generate(i, 77, &spec, &vocab, None).unwrap()).collect()
}

#[test]
fn distillation_alone_reproduces_teacher_outputs() {
    let f = distillation_fidelity();
    assert!(f.distinct_references >= 8, "references nearly image-independent");
    assert!(f.reached.is_some(), "final exact-match {}", f.final_exact);
}

fn tiny_bundle(seed: u64) -> ModelBundle {
    let mc = ModelConfig {
        max_len: 36,
        ..tiny_model()
    };
    let enc = VisionEncoder::new(&mc, &mut Rng::new(seed)).unwrap();
    let dec = ExplanationDecoder::new(&mc, &mut Rng::new(seed + 1)).unwrap();
    ModelBundle::from_pretrained(&enc, &dec, ClassifierMode::Multimodal, &mut Rng::new(seed + 2)).unwrap()
}

fn step_once(config: TrainConfig, data: &[Example]) -> (ModelBundle, Trainer, LossBreakdown) {
    let before = tiny_bundle(11);
    let mut t = Trainer::new(before.clone(), config, 10).unwrap();
    let batch: Vec<&Example> = data.iter().take(4).collect();
    let lb = t.train_step(&batch).unwrap();
    (before, t, lb)
}

#[test]
fn breakdown_total_is_recomputable() {
    let data = images(4);
    for (lambda, reg) in [(0.1, Regularizer::ExplanationDistillation), (0.5, Regularizer::L2sp), (0.0, Regularizer::ExplanationDistillation)] {
        let cfg = TrainConfig {
            lambda,
            regularizer: reg,
            ..TrainConfig::default()
        };
        let (_, _, lb) = step_once(cfg, &data);
        assert!((lb.total - (lb.l_cls + lambda * lb.r_int)).abs() <= 1e-12, "{lb:?}");
        if lambda == 0.0 {
            assert_eq!(lb.total, lb.l_cls);
        }
        assert!(lb.l_cls.is_finite() && lb.r_int.is_finite());
    }
}

#[test]
fn frozen_baseline_only_moves_the_classifier() {
    let data = images(4);
    let cfg = TrainConfig {
        lambda: 0.0,
        regularizer: Regularizer::None,
        freeze_backbone: true,
        ..TrainConfig::default()
    };
    let (before, t, _) = step_once(cfg, &data);
    assert!(t.bundle.encoder.store.values_equal(&before.encoder.store));
    assert!(t.bundle.decoder.store.values_equal(&before.decoder.store));
    assert!(!t.bundle.classifier.store.values_equal(&before.classifier.store));
}

#[test]
fn zero_learning_rate_changes_nothing_and_teacher_never_moves() {
    let data = images(4);
    let cfg = TrainConfig {
        lr: 0.0,
        ..TrainConfig::default()
    };
    let (before, t, lb) = step_once(cfg, &data);
    assert!(lb.total.is_finite());
    assert!(t.bundle.encoder.store.values_equal(&before.encoder.store));
    assert!(t.bundle.decoder.store.values_equal(&before.decoder.store));
    assert!(t.bundle.classifier.store.values_equal(&before.classifier.store));

    let (before, mut t, _) = step_once(TrainConfig::default(), &data);
    let batch: Vec<&Example> = data.iter().collect();
    for _ in 0..3 {
        t.train_step(&batch).unwrap();
    }
    assert!(!t.bundle.decoder.store.values_equal(&before.decoder.store));
    assert_eq!(t.bundle.teacher_encoder.store.checksum(), before.teacher_encoder.store.checksum());
    assert_eq!(t.bundle.teacher_decoder.store.checksum(), before.teacher_decoder.store.checksum());
}

#[test]
fn teacher_starts_as_an_exact_copy() {
    let b = tiny_bundle(3);
    assert!(b.encoder.store.values_equal(&b.teacher_encoder.store));
    assert!(b.decoder.store.values_equal(&b.teacher_decoder.store));
}

#[test]
fn classification_loss_closed_forms() {
    let mut g = Graph::new();
    let x = g.constant(xbm_core::Tensor::new(vec![2, 8], vec![0.0; 16]).unwrap()).unwrap();
    let l = classification_loss(&mut g, x, &[0, 5]).unwrap();
    assert!((g.value(l).item().unwrap() - 8f64.ln()).abs() < 1e-12);
    let mut logits = vec![0.0; 8];
    logits[3] = 50.0;
    let x = g.constant(xbm_core::Tensor::new(vec![1, 8], logits).unwrap()).unwrap();
    let l = classification_loss(&mut g, x, &[3]).unwrap();
    assert!(g.value(l).item().unwrap() < 1e-20);
    assert!(classification_loss(&mut g, x, &[8]).is_err());
}

#[test]
fn l2sp_values_and_gradient() {
    let a = tiny_bundle(5);
    let mut moved = a.decoder.store.clone();
    let id = moved.ids().nth(3).unwrap();
    moved.value_mut(id).data_mut()[0] += 0.25;
    let mut g = Graph::new();
    let zero = l2sp(&mut g, &[&a.decoder.store], &[&a.teacher_decoder.store]).unwrap();
    assert_eq!(g.value(zero).item().unwrap(), 0.0);
    let mut g = Graph::new();
    let r = l2sp(&mut g, &[&moved], &[&a.teacher_decoder.store]).unwrap();
    assert!((g.value(r).item().unwrap() - 0.0625).abs() < 1e-12);
    g.backward(r).unwrap();
    moved.accumulate_grads(&g);
    assert!((moved.grad(id).data()[0] - 0.5).abs() < 1e-12);
    assert!(l2sp(&mut Graph::new(), &[&moved], &[&a.teacher_encoder.store]).is_err());
}

#[test]
fn same_seed_runs_produce_identical_metrics() {
    let data = images(24);
    let (train, val) = data.split_at(16);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let run = || {
        let out = train_xbm(tiny_bundle(7), train, val, &cfg, |_| {}).unwrap();
        let lines: Vec<String> = out.metrics.iter().map(|m| m.line()).collect();
        (lines, out.bundle.to_checkpoint().encode())
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_epoch_pretraining_returns_the_initialization() {
    let spec = SceneSpec::default();
    let vocab = Vocabulary::standard();
    let data: Vec<Example> = (0..4).map(|i| Example::generate(i, 1, &spec, &vocab, Some(0)).unwrap()).collect();
    let mc = tiny_model();
    let mc = ModelConfig { max_len: 36, ..mc };
    let cfg = PretrainConfig {
        epochs: 0,
        ..PretrainConfig::default()
    };
    let out = pretrain_captioner(&data, &mc, &cfg).unwrap();
    assert_eq!(out.steps, 0);
    // Initialization depends only on the seed, so other data gives the same weights.
    let other: Vec<Example> = (10..12).map(|i| Example::generate(i, 1, &spec, &vocab, Some(0)).unwrap()).collect();
    let again = pretrain_captioner(&other, &mc, &cfg).unwrap();
    assert!(out.encoder.store.values_equal(&again.encoder.store));
    assert!(out.decoder.store.values_equal(&again.decoder.store));
    let one = pretrain_captioner(&data, &mc, &PretrainConfig { epochs: 1, ..cfg.clone() }).unwrap();
    assert!(!one.decoder.store.values_equal(&out.decoder.store));
    let no_caps: Vec<Example> = images(2);
    assert!(pretrain_captioner(&no_caps, &mc, &cfg).is_err());
}

#[test]
fn distillation_loss_falls_on_a_fixed_batch() {
    let mc = tiny_model();
    let mut rng = Rng::new(6);
    let teacher_enc = VisionEncoder::new(&mc, &mut rng).unwrap();
    let teacher_dec = ExplanationDecoder::new(&mc, &mut rng).unwrap();
    let mut enc = VisionEncoder::new(&mc, &mut rng).unwrap();
    let mut dec = ExplanationDecoder::new(&mc, &mut rng).unwrap();
    let data = images(8);
    let refs = explain_all(&teacher_enc, &teacher_dec, &data, 3).unwrap();
    let r: Vec<&xbm_core::nn::text::TokenSequence> = refs.iter().collect();
    let imgs: Vec<&[f64]> = data.iter().map(|e| e.image.as_slice()).collect();
    let mut opt = xbm_core::autodiff::AdamW::new(Default::default());
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut g = Graph::new();
        let h = enc.encode(&mut g, &imgs).unwrap();
        let mem = dec.memory(&mut g, h).unwrap();
        let loss = distillation_loss(&mut g, &dec, &mem, &r, DistillNorm::Token).unwrap();
        losses.push(g.value(loss).item().unwrap());
        g.backward(loss).unwrap();
        enc.store.accumulate_grads(&g);
        dec.store.accumulate_grads(&g);
        opt.step(&mut [&mut enc.store, &mut dec.store], 3e-4, Some(CLIP_NORM)).unwrap();
    }
    let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert_eq!(rises, 0, "{:?}", &losses[..10]);
    assert!(losses[199] < 0.5 * losses[0]);
}

#[test]
fn sequence_distillation_is_the_reference_log_likelihood() {
    let mc = tiny_model();
    let mut rng = Rng::new(8);
    let teacher_enc = VisionEncoder::new(&mc, &mut rng).unwrap();
    let teacher_dec = ExplanationDecoder::new(&mc, &mut rng).unwrap();
    let enc = VisionEncoder::new(&mc, &mut rng).unwrap();
    let dec = ExplanationDecoder::new(&mc, &mut rng).unwrap();
    let data = images(4);
    let refs = explain_all(&teacher_enc, &teacher_dec, &data, 3).unwrap();

    let mut want = Vec::new();
    for (e, r) in data.iter().zip(&refs) {
        let mut g = Graph::new();
        let h = enc.encode(&mut g, &[e.image.as_slice()]).unwrap();
        let scorer = DecoderScorer::new(&dec, g.value(h).clone());
        let mut s = scorer.start().unwrap();
        let (mut prev, mut nll) = (xbm_core::nn::text::BOS, 0.0);
        for &t in &r.ids()[..r.non_pad_len()] {
            nll -= scorer.advance(&mut s, &[prev]).unwrap()[0][t];
            prev = t;
        }
        want.push(nll);
    }

    let imgs: Vec<&[f64]> = data.iter().map(|e| e.image.as_slice()).collect();
    let r: Vec<&xbm_core::nn::text::TokenSequence> = refs.iter().collect();
    let loss = |norm| {
        let mut g = Graph::new();
        let h = enc.encode(&mut g, &imgs).unwrap();
        let mem = dec.memory(&mut g, h).unwrap();
        let l = distillation_loss(&mut g, &dec, &mem, &r, norm).unwrap();
        g.value(l).item().unwrap()
    };
    let n = want.len() as f64;
    let seq = want.iter().sum::<f64>() / n;
    let tok = want.iter().zip(&refs).map(|(w, r)| w / r.non_pad_len() as f64).sum::<f64>() / n;
    assert!((loss(DistillNorm::Sequence) - seq).abs() < 1e-9 * seq.max(1.0), "{} vs {seq}", loss(DistillNorm::Sequence));
    assert!((loss(DistillNorm::Token) - tok).abs() < 1e-9 * tok.max(1.0));
}
