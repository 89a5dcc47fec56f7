//! Oracles shared by the core integration tests and the acceptance target.
#![allow(dead_code)]

use xbm_core::autodiff::gradcheck::{check_gradients, GradCheck};
use xbm_core::autodiff::{AdamW, AdamWConfig};
use xbm_core::decoding::{
    beam_search, greedy, gumbel_softmax, image_tokens, relaxed_sample, BeamConfig, BeamHypothesis, DecoderScorer,
};
use xbm_core::nn::text::{TokenSequence, Vocabulary, EOS};
use xbm_core::nn::{ExplanationDecoder, ModelConfig, VisionEncoder};
use xbm_core::rng::Rng;
use xbm_core::training::{
    distillation_loss, DistillNorm, enumerate_log_probs, epoch_batches, explain_all, kl_exact, sequence_nll, CLIP_NORM,
};
use xbm_core::worldgen::{Example, SceneSpec};
use xbm_core::{Graph, Result, Tensor, Var};

pub const GRAD_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
pub const TEACHER_SHARPNESS: f64 = 4.0;
/// Fitting a single mode overshoots the teacher's mass on it at larger
/// steps, after which the exact KL rises again.
pub const DISTILL_LR: f64 = 2e-4;

pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One random instance of an operator: its inputs and how to apply it.
pub struct OpCase {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

type CaseFn = fn(&mut Rng) -> OpCase;

fn case(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        inputs,
        build: Box::new(build),
    }
}

/// Every differentiable graph operator with a random-instance generator.
/// All dimensions stay at or below 8.
pub fn operators() -> Vec<(&'static str, CaseFn)> {
    vec![
        ("matmul", |r| {
            let (b, n, k, m) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 5));
            case(vec![random_tensor(r, &[b, n, k]), random_tensor(r, &[k, m])], |g, v| g.matmul(v[0], v[1]))
        }),
        ("transpose", |r| {
            let s = [dim(r, 1, 3), dim(r, 1, 5), dim(r, 1, 5)];
            case(vec![random_tensor(r, &s)], |g, v| g.transpose(v[0]))
        }),
        ("add", |r| {
            let (n, d) = (dim(r, 1, 5), dim(r, 1, 6));
            case(vec![random_tensor(r, &[n, d]), random_tensor(r, &[d])], |g, v| g.add(v[0], v[1]))
        }),
        ("sub", |r| {
            let s = [dim(r, 1, 5), dim(r, 1, 6)];
            case(vec![random_tensor(r, &s), random_tensor(r, &s)], |g, v| g.sub(v[0], v[1]))
        }),
        ("mul", |r| {
            let (n, d) = (dim(r, 1, 5), dim(r, 1, 6));
            case(vec![random_tensor(r, &[n, d]), random_tensor(r, &[n, d])], |g, v| g.mul(v[0], v[1]))
        }),
        ("mul-broadcast", |r| {
            let (n, d) = (dim(r, 1, 5), dim(r, 1, 6));
            case(vec![random_tensor(r, &[n, d]), random_tensor(r, &[d])], |g, v| g.mul(v[0], v[1]))
        }),
        ("scale", |r| {
            let s = r.normal() * 3.0;
            let n = dim(r, 1, 8);
            case(vec![random_tensor(r, &[n])], move |g, v| g.scale(v[0], s))
        }),
        ("gather", |r| {
            let (vocab, d, n) = (dim(r, 2, 6), dim(r, 1, 5), dim(r, 1, 6));
            let ids: Vec<usize> = (0..n).map(|_| r.below(vocab)).collect();
            case(vec![random_tensor(r, &[vocab, d])], move |g, v| g.gather(v[0], &ids))
        }),
        ("softmax", |r| {
            let s = [dim(r, 1, 4), dim(r, 2, 8)];
            case(vec![random_tensor(r, &s)], |g, v| g.softmax(v[0]))
        }),
        ("log-softmax", |r| {
            let s = [dim(r, 1, 4), dim(r, 2, 8)];
            case(vec![random_tensor(r, &s)], |g, v| g.log_softmax(v[0]))
        }),
        ("layer-norm", |r| {
            let (n, d) = (dim(r, 1, 4), dim(r, 2, 8));
            case(
                vec![random_tensor(r, &[n, d]), random_tensor(r, &[d]), random_tensor(r, &[d])],
                |g, v| g.layer_norm(v[0], v[1], v[2]),
            )
        }),
        ("gelu", |r| {
            let n = dim(r, 1, 8);
            case(vec![random_tensor(r, &[n])], |g, v| g.gelu(v[0]))
        }),
        ("tanh", |r| {
            let n = dim(r, 1, 8);
            case(vec![random_tensor(r, &[n])], |g, v| g.tanh(v[0]))
        }),
        ("concat", |r| {
            let (n, a, b) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
            let axis = r.below(2);
            let (sa, sb) = if axis == 0 { ([a, n], [b, n]) } else { ([n, a], [n, b]) };
            case(vec![random_tensor(r, &sa), random_tensor(r, &sb)], move |g, v| g.concat(&[v[0], v[1]], axis))
        }),
        ("slice", |r| {
            let (n, d) = (dim(r, 1, 4), dim(r, 2, 8));
            let start = r.below(d);
            let len = 1 + r.below(d - start);
            case(vec![random_tensor(r, &[n, d])], move |g, v| g.slice(v[0], 1, start, len))
        }),
        ("reshape", |r| {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            case(vec![random_tensor(r, &[a, b, 2])], move |g, v| g.reshape(v[0], &[2 * b, a]))
        }),
        ("select-rows", |r| {
            let (n, d) = (dim(r, 1, 5), dim(r, 1, 5));
            let rows: Vec<usize> = (0..dim(r, 1, 6)).map(|_| r.below(n)).collect();
            case(vec![random_tensor(r, &[n, d])], move |g, v| g.select_rows(v[0], &rows))
        }),
        ("mean-axis", |r| {
            let s = [dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4)];
            let axis = r.below(3);
            case(vec![random_tensor(r, &s)], move |g, v| g.mean_axis(v[0], axis))
        }),
        ("sum", |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 4)];
            case(vec![random_tensor(r, &s)], |g, v| g.sum(v[0]))
        }),
        ("mean", |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 4)];
            case(vec![random_tensor(r, &s)], |g, v| g.mean(v[0]))
        }),
        ("l2-normalize", |r| {
            let s = [dim(r, 1, 4), dim(r, 2, 6)];
            case(vec![random_tensor(r, &s)], |g, v| g.l2_normalize(v[0]))
        }),
        ("attention", |r| {
            let heads = dim(r, 1, 2);
            let d = heads * dim(r, 1, 3);
            let (b, n, m) = (dim(r, 1, 2), dim(r, 1, 4), dim(r, 1, 5));
            case(
                vec![random_tensor(r, &[b, n, d]), random_tensor(r, &[b, m, d]), random_tensor(r, &[b, m, d])],
                move |g, v| g.attention(v[0], v[1], v[2], heads, false),
            )
        }),
        ("attention-causal", |r| {
            let heads = dim(r, 1, 2);
            let d = heads * dim(r, 1, 3);
            let (b, m) = (dim(r, 1, 2), dim(r, 1, 5));
            let n = dim(r, 1, m);
            case(
                vec![random_tensor(r, &[b, n, d]), random_tensor(r, &[b, m, d]), random_tensor(r, &[b, m, d])],
                move |g, v| g.attention(v[0], v[1], v[2], heads, true),
            )
        }),
        ("cross-entropy", |r| {
            let (n, c) = (dim(r, 1, 5), dim(r, 2, 8));
            let targets: Vec<usize> = (0..n).map(|_| r.below(c)).collect();
            let weights: Vec<f64> = (0..n).map(|_| r.next_f64()).collect();
            case(vec![random_tensor(r, &[n, c])], move |g, v| g.cross_entropy_weighted(v[0], &targets, &weights))
        }),
        ("gumbel-relaxed-sample", |r| {
            let (n, c) = (dim(r, 1, 4), dim(r, 2, 8));
            let noise = Tensor::new(vec![n, c], (0..n * c).map(|_| r.gumbel()).collect()).unwrap();
            let tau = 0.5 + 2.0 * r.next_f64();
            case(vec![random_tensor(r, &[n, c])], move |g, v| {
                let lp = g.log_softmax(v[0])?;
                relaxed_sample(g, lp, noise.clone(), tau)
            })
        }),
    ]
}

/// Worst gradient check over `cases` random instances of one operator.
pub fn gradcheck_operator(make: CaseFn, cases: usize, seed: u64) -> GradCheck {
    let root = Rng::new(seed);
    let mut worst: Option<GradCheck> = None;
    for i in 0..cases {
        let mut r = root.substream(&[i as u64]);
        let c = make(&mut r);
        let rep = check_gradients(&c.inputs, |g, v| (c.build)(g, v), FD_STEP, i as u64).unwrap();
        if worst.as_ref().map_or(true, |w| rep.max_rel_error > w.max_rel_error) {
            worst = Some(rep);
        }
    }
    worst.unwrap()
}

/// A randomly initialized decoder over a bare vocabulary of `vocab`
/// tokens with one fixed random image token.
pub fn tiny_decoder(seed: u64, vocab: usize, max_len: usize) -> (ExplanationDecoder, Tensor) {
    let config = ModelConfig {
        d_model: 8,
        depth: 1,
        heads: 2,
        mlp_hidden: 16,
        patch: 8,
        height: 8,
        width: 8,
        max_len,
        vocab_size: vocab,
        num_classes: 2,
    };
    let mut rng = Rng::new(seed);
    let dec = ExplanationDecoder::new(&config, &mut rng).unwrap();
    let img = random_tensor(&mut rng, &[1, 1, 8]);
    (dec, img)
}

/// Fixed-length search over every token (no EOS, nothing banned).
pub fn open_beam(width: usize, len: usize) -> BeamConfig {
    BeamConfig {
        width,
        max_len: len,
        eos: None,
        banned: vec![],
        start_token: 1,
    }
}

pub struct BeamOracle {
    pub beam: BeamHypothesis,
    pub exhaustive_best: Vec<usize>,
    pub exhaustive_lp: f64,
    pub width_one_is_greedy: bool,
}

/// Compare beam search at the full path bound with brute-force
/// enumeration of all `vocab^len` sequences on a random decoder.
pub fn beam_oracle(seed: u64, vocab: usize, len: usize) -> BeamOracle {
    let (dec, img) = tiny_decoder(seed, vocab, len);
    let scorer = DecoderScorer::new(&dec, img);
    let all = enumerate_log_probs(&scorer, 1, len).unwrap();
    let (best, &lp) = all
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .unwrap();
    let mut tokens = vec![0; len];
    let mut k = best;
    for slot in tokens.iter_mut().rev() {
        *slot = k % vocab;
        k /= vocab;
    }
    let width = vocab.pow(len as u32);
    let beam = beam_search(&scorer, &open_beam(width, len)).unwrap();
    let w1 = beam_search(&scorer, &open_beam(1, len)).unwrap();
    let gr = greedy(&scorer, &open_beam(1, len)).unwrap();
    BeamOracle {
        beam,
        exhaustive_best: tokens,
        exhaustive_lp: lp,
        width_one_is_greedy: w1 == gr,
    }
}

/// Multiply the output projection so next-token distributions sharpen,
/// standing in for a pretrained, confident captioner.
pub fn sharpen(dec: &mut ExplanationDecoder, factor: f64) {
    for name in ["head.weight", "head.bias"] {
        let id = dec.store.find(name).unwrap();
        for w in dec.store.value_mut(id).data_mut() {
            *w *= factor;
        }
    }
}

/// Train a random student on the beam references of a sharpened random
/// teacher for `steps` steps; returns the exact KL(teacher || student)
/// before and after.
pub fn distill_kl(seed: u64, vocab: usize, len: usize, steps: usize, lr: f64) -> (f64, f64) {
    let (mut teacher, img) = tiny_decoder(seed, vocab, len);
    sharpen(&mut teacher, TEACHER_SHARPNESS);
    let (mut student, _) = tiny_decoder(seed + 10_000, vocab, len);
    let kl = |s: &ExplanationDecoder| {
        kl_exact(&DecoderScorer::new(s, img.clone()), &DecoderScorer::new(&teacher, img.clone()), 1, len).unwrap()
    };
    let reference = beam_search(&DecoderScorer::new(&teacher, img.clone()), &open_beam(3, len)).unwrap();
    let before = kl(&student);
    let mut opt = AdamW::new(AdamWConfig {
        lr,
        ..AdamWConfig::default()
    });
    for _ in 0..steps {
        let mut g = Graph::new();
        let im = g.constant(img.clone()).unwrap();
        let mem = student.memory(&mut g, im).unwrap();
        let loss = sequence_nll(&mut g, &student, &mem, &[reference.tokens.clone()], &[len]).unwrap();
        g.backward(loss).unwrap();
        student.store.accumulate_grads(&g);
        opt.step(&mut [&mut student.store], lr, None).unwrap();
    }
    (before, kl(&student))
}

/// Empirical argmax frequencies of Gumbel-softmax draws.
pub fn gumbel_frequencies(logits: &[f64], tau: f64, draws: usize, seed: u64) -> (Vec<f64>, f64) {
    let mut rng = Rng::new(seed);
    let mut counts = vec![0usize; logits.len()];
    let mut worst_sum: f64 = 0.0;
    for _ in 0..draws {
        let y = gumbel_softmax(logits, tau, &mut rng).unwrap();
        worst_sum = worst_sum.max((y.iter().sum::<f64>() - 1.0).abs());
        let k = y
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        counts[k] += 1;
    }
    (counts.iter().map(|&c| c as f64 / draws as f64).collect(), worst_sum)
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub struct Fidelity {
    pub distinct_references: usize,
    /// First checked step at which exact match reached 90%.
    pub reached: Option<usize>,
    pub final_exact: f64,
}

/// Distillation-only training of a fresh student on a fixed random
/// teacher's beam outputs over 64 images, checking student greedy
/// exact-match every 100 steps up to 2000.
pub fn distillation_fidelity() -> Fidelity {
    let mc = ModelConfig {
        d_model: 16,
        depth: 1,
        heads: 2,
        mlp_hidden: 32,
        max_len: 8,
        ..ModelConfig::default()
    };
    let teacher_enc = VisionEncoder::new(&mc, &mut Rng::new(1)).unwrap();
    let teacher_dec = ExplanationDecoder::new(&mc, &mut Rng::new(2)).unwrap();
    let mut enc = VisionEncoder::new(&mc, &mut Rng::new(3)).unwrap();
    let mut dec = ExplanationDecoder::new(&mc, &mut Rng::new(4)).unwrap();
    let (spec, vocab) = (SceneSpec::default(), Vocabulary::standard());
    let data: Vec<Example> = (0..64).map(|i| Example::generate(i, 77, &spec, &vocab, None).unwrap()).collect();
    let refs = explain_all(&teacher_enc, &teacher_dec, &data, 3).unwrap();
    let distinct: std::collections::BTreeSet<_> = refs.iter().map(|r| r.ids().to_vec()).collect();
    let exact = |enc: &VisionEncoder, dec: &ExplanationDecoder| {
        data.iter()
            .zip(&refs)
            .filter(|(e, r)| {
                let tokens = image_tokens(enc, &e.image).unwrap();
                let h = greedy(&DecoderScorer::new(dec, tokens), &BeamConfig::explanation(1, mc.max_len)).unwrap();
                h.content(EOS) == r.content()
            })
            .count() as f64
            / data.len() as f64
    };
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut reached = None;
    for step in 0..2000 {
        let batch = epoch_batches(64, 16, 5, step / 4)[step % 4].clone();
        let mut g = Graph::new();
        let imgs: Vec<&[f64]> = batch.iter().map(|&i| data[i].image.as_slice()).collect();
        let h = enc.encode(&mut g, &imgs).unwrap();
        let mem = dec.memory(&mut g, h).unwrap();
        let r: Vec<&TokenSequence> = batch.iter().map(|&i| &refs[i]).collect();
        let loss = distillation_loss(&mut g, &dec, &mem, &r, DistillNorm::Token).unwrap();
        g.backward(loss).unwrap();
        enc.store.accumulate_grads(&g);
        dec.store.accumulate_grads(&g);
        opt.step(&mut [&mut enc.store, &mut dec.store], 3e-3, Some(CLIP_NORM)).unwrap();
        if (step + 1) % 100 == 0 && exact(&enc, &dec) >= 0.9 {
            reached = Some(step + 1);
            break;
        }
    }
    Fidelity {
        distinct_references: distinct.len(),
        reached,
        final_exact: exact(&enc, &dec),
    }
}
