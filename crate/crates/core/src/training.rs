//! Captioner pretraining and the explanation-bottleneck training loop.
//!
//! One XBM step encodes a batch, samples a relaxed explanation from the
//! student decoder, classifies from it, adds the interpretability
//! regularizer and updates classifier, decoder and encoder jointly.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{cosine_lr, AdamW, AdamWConfig, Graph, ParamStore, Tensor, Var};
use crate::decoding::{explain, GumbelNoise, GumbelSchedule, StepModel};
use crate::error::{Result, XbmError};
use crate::io::KvConfig;
use crate::nn::layers::Memory;
use crate::nn::text::{TokenSequence, BOS};
use crate::nn::{ClassifierMode, ExplanationDecoder, Explanation, ModelBundle, ModelConfig, VisionEncoder};
use crate::par::par_map;
use crate::rng::Rng;
use crate::worldgen::Example;

/// Global gradient-norm ceiling applied to every update.
pub const CLIP_NORM: f64 = 5.0;

/// Substream tags under the run seed.
const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_INIT: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regularizer {
    ExplanationDistillation,
    L2sp,
    None,
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regularizer::ExplanationDistillation => "explanation_distillation",
            Regularizer::L2sp => "l2sp",
            Regularizer::None => "none",
        })
    }
}

impl FromStr for Regularizer {
    type Err = XbmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "explanation_distillation" => Ok(Regularizer::ExplanationDistillation),
            "l2sp" => Ok(Regularizer::L2sp),
            "none" => Ok(Regularizer::None),
            _ => Err(XbmError::config("regularizer", format!("unknown regularizer `{s}`"))),
        }
    }
}

/// Normalization of the distillation cross-entropy within one reference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillNorm {
    /// Sum over tokens: `-log p(e_p | x)` of the whole reference.
    Sequence,
    /// Mean over non-PAD tokens, so lambda's scale ignores caption length.
    Token,
}

impl fmt::Display for DistillNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistillNorm::Sequence => "sequence",
            DistillNorm::Token => "token",
        })
    }
}

impl FromStr for DistillNorm {
    type Err = XbmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequence" => Ok(DistillNorm::Sequence),
            "token" => Ok(DistillNorm::Token),
            _ => Err(XbmError::config("distill_norm", format!("unknown normalization `{s}`"))),
        }
    }
}

/// How the decoder is fed during relaxed sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// Each relaxed token is fed back as an embedding mixture.
    FreeRunning,
    /// Feed the teacher reference instead. Accepted by the parser so the
    /// alternative is nameable, rejected at validation.
    TeacherForced,
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::FreeRunning => "free_running",
            SamplingMode::TeacherForced => "teacher_forced",
        })
    }
}

impl FromStr for SamplingMode {
    type Err = XbmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "free_running" => Ok(SamplingMode::FreeRunning),
            "teacher_forced" => Ok(SamplingMode::TeacherForced),
            _ => Err(XbmError::config("sampling", format!("unknown sampling mode `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Initial learning rate, decayed by a cosine schedule over the run.
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub tau0: f64,
    pub anneal_rate: f64,
    pub tau_min: f64,
    pub regularizer: Regularizer,
    pub distill_norm: DistillNorm,
    pub classifier_mode: ClassifierMode,
    pub beam_width: usize,
    pub cache_references: bool,
    /// Freeze encoder and decoder; only the classifier learns.
    pub freeze_backbone: bool,
    pub weight_decay: f64,
    pub sampling: SamplingMode,
    /// Hard cap on optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            lr: 1e-3,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            tau0: 10.0,
            anneal_rate: 1e-4,
            tau_min: 0.1,
            regularizer: Regularizer::ExplanationDistillation,
            distill_norm: DistillNorm::Sequence,
            classifier_mode: ClassifierMode::Multimodal,
            beam_width: 3,
            cache_references: true,
            freeze_backbone: false,
            weight_decay: 0.0,
            sampling: SamplingMode::FreeRunning,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> GumbelSchedule {
        GumbelSchedule {
            tau0: self.tau0,
            rate: self.anneal_rate,
            tau_min: self.tau_min,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(XbmError::config("lambda", "must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(XbmError::config("batch_size", "must be at least 1"));
        }
        if !(self.lr >= 0.0) {
            return Err(XbmError::config("lr", "must be nonnegative"));
        }
        if self.beam_width == 0 {
            return Err(XbmError::config("beam_width", "must be at least 1"));
        }
        if self.sampling == SamplingMode::TeacherForced {
            return Err(XbmError::config("sampling", "teacher_forced sampling is not implemented"));
        }
        self.schedule().validate()
    }

    /// Read the training keys of a config; keys not named here are left
    /// for the caller (or [`KvConfig::finish`]) to reject.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let d = TrainConfig::default();
        let c = TrainConfig {
            lambda: kv.get_or("lambda", d.lambda)?,
            lr: kv.get_or("lr", d.lr)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            seed: kv.get_or("seed", d.seed)?,
            tau0: kv.get_or("tau0", d.tau0)?,
            anneal_rate: kv.get_or("anneal_rate", d.anneal_rate)?,
            tau_min: kv.get_or("tau_min", d.tau_min)?,
            regularizer: kv.get_or("regularizer", d.regularizer)?,
            distill_norm: kv.get_or("distill_norm", d.distill_norm)?,
            classifier_mode: kv.get_or("classifier_mode", d.classifier_mode)?,
            beam_width: kv.get_or("beam_width", d.beam_width)?,
            cache_references: kv.get_or("cache_references", d.cache_references)?,
            freeze_backbone: kv.get_or("freeze_backbone", d.freeze_backbone)?,
            weight_decay: kv.get_or("weight_decay", d.weight_decay)?,
            sampling: kv.get_or("sampling", d.sampling)?,
            max_steps: kv.get("max_steps")?,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn echo(&self) -> String {
        let mut s = format!(
            "lambda = {}\nlr = {}\nbatch_size = {}\nepochs = {}\nseed = {}\ntau0 = {}\nanneal_rate = {}\ntau_min = {}\nregularizer = {}\ndistill_norm = {}\nclassifier_mode = {}\nbeam_width = {}\ncache_references = {}\nfreeze_backbone = {}\nweight_decay = {}\nsampling = {}\n",
            self.lambda,
            self.lr,
            self.batch_size,
            self.epochs,
            self.seed,
            self.tau0,
            self.anneal_rate,
            self.tau_min,
            self.regularizer,
            self.distill_norm,
            self.classifier_mode,
            self.beam_width,
            self.cache_references,
            self.freeze_backbone,
            self.weight_decay,
            self.sampling
        );
        if let Some(m) = self.max_steps {
            s.push_str(&format!("max_steps = {m}\n"));
        }
        s
    }
}

/// Loss terms of one step; `total = l_cls + lambda * r_int`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub r_int: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Mean cross-entropy of `[B, K]` logits against labels.
pub fn classification_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = *g.shape(logits).last().unwrap_or(&0);
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(XbmError::Invalid(format!("label {bad} outside {k} classes")));
    }
    g.cross_entropy(logits, labels)
}

/// Teacher-forced negative log-likelihood of `targets` (rows of equal
/// length), counting the first `counted[b]` positions of row `b`: mean over
/// counted positions per row, then over rows.
pub fn sequence_nll(g: &mut Graph, decoder: &ExplanationDecoder, memory: &Memory, targets: &[Vec<usize>], counted: &[usize]) -> Result<Var> {
    weighted_nll(g, decoder, memory, targets, counted, DistillNorm::Token)
}

fn weighted_nll(
    g: &mut Graph,
    decoder: &ExplanationDecoder,
    memory: &Memory,
    targets: &[Vec<usize>],
    counted: &[usize],
    norm: DistillNorm,
) -> Result<Var> {
    let b = targets.len();
    if b == 0 || counted.len() != b {
        return Err(XbmError::Invalid("sequence loss needs one count per target row".into()));
    }
    let n = targets[0].len();
    let inputs: Vec<Vec<usize>> = targets
        .iter()
        .map(|t| std::iter::once(BOS).chain(t[..n.saturating_sub(1)].iter().copied()).collect())
        .collect();
    let x = decoder.embed_hard(g, &inputs)?;
    let logits = decoder.forward(g, memory, x)?;
    let flat_targets: Vec<usize> = targets.iter().flatten().copied().collect();
    let mut weights = Vec::with_capacity(b * n);
    for &c in counted {
        let c = c.min(n).max(1);
        let w = match norm {
            DistillNorm::Token => 1.0 / (c * b) as f64,
            DistillNorm::Sequence => 1.0 / b as f64,
        };
        for l in 0..n {
            weights.push(if l < c { w } else { 0.0 });
        }
    }
    g.cross_entropy_weighted(logits, &flat_targets, &weights)
}

/// Sequence-level distillation onto teacher references, averaged over the
/// batch. `norm` picks the reference's full negative log-likelihood or its
/// per-token mean over non-PAD positions.
pub fn distillation_loss(
    g: &mut Graph,
    decoder: &ExplanationDecoder,
    memory: &Memory,
    references: &[&TokenSequence],
    norm: DistillNorm,
) -> Result<Var> {
    let targets: Vec<Vec<usize>> = references.iter().map(|r| r.ids().to_vec()).collect();
    let counted: Vec<usize> = references.iter().map(|r| r.non_pad_len()).collect();
    weighted_nll(g, decoder, memory, &targets, &counted, norm)
}

/// `sum ||p - p_pretrained||^2` over matching parameter trees.
pub fn l2sp(g: &mut Graph, students: &[&ParamStore], anchors: &[&ParamStore]) -> Result<Var> {
    if students.len() != anchors.len() {
        return Err(XbmError::Invalid("l2sp needs one anchor per store".into()));
    }
    let mut terms = Vec::new();
    for (s, a) in students.iter().zip(anchors) {
        s.check_same_tree(a)?;
        for (id, p) in s.ids().zip(a.params()) {
            let v = g.param(s, id)?;
            let anchor = g.constant(p.value.clone())?;
            let d = g.sub(v, anchor)?;
            let sq = g.mul(d, d)?;
            terms.push(g.sum(sq)?);
        }
    }
    let mut acc = match terms.first() {
        Some(&t) => t,
        None => return g.constant(Tensor::scalar(0.0)),
    };
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Largest enumeration [`kl_exact`] will attempt.
pub const KL_ENUMERATION_LIMIT: usize = 100_000;

/// Log-probabilities of every sequence in `V^len` (lexicographic order)
/// under an incremental model.
pub fn enumerate_log_probs<M: StepModel>(model: &M, start_token: usize, len: usize) -> Result<Vec<f64>> {
    let v = model.vocab_size();
    let total = (v as f64).powi(len as i32);
    if total > KL_ENUMERATION_LIMIT as f64 {
        return Err(XbmError::Invalid(format!(
            "{v}^{len} sequences exceed the enumeration limit of {KL_ENUMERATION_LIMIT}"
        )));
    }
    let mut state = model.start()?;
    let mut prefix_lp = vec![0.0];
    let mut inputs = vec![start_token];
    for _ in 0..len {
        let lps = model.advance(&mut state, &inputs)?;
        let mut next_lp = Vec::with_capacity(prefix_lp.len() * v);
        let mut parents = Vec::with_capacity(prefix_lp.len() * v);
        let mut next_inputs = Vec::with_capacity(prefix_lp.len() * v);
        for (i, &base) in prefix_lp.iter().enumerate() {
            for t in 0..v {
                next_lp.push(base + lps[i][t]);
                parents.push(i);
                next_inputs.push(t);
            }
        }
        model.reorder(&mut state, &parents)?;
        prefix_lp = next_lp;
        inputs = next_inputs;
    }
    Ok(prefix_lp)
}

/// `KL(q || p) = sum_e q(e) log(q(e) / p(e))` by full enumeration of `V^len`.
pub fn kl_exact<P: StepModel, Q: StepModel>(student: &P, teacher: &Q, start_token: usize, len: usize) -> Result<f64> {
    if student.vocab_size() != teacher.vocab_size() {
        return Err(XbmError::Invalid("student and teacher vocabularies differ".into()));
    }
    let lp = enumerate_log_probs(student, start_token, len)?;
    let lq = enumerate_log_probs(teacher, start_token, len)?;
    Ok(lq
        .iter()
        .zip(&lp)
        .map(|(&q, &p)| if q == f64::NEG_INFINITY { 0.0 } else { q.exp() * (q - p) })
        .sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub max_steps: Option<usize>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 2e-3,
            batch_size: 16,
            epochs: 8,
            seed: 0,
            max_steps: None,
        }
    }
}

impl PretrainConfig {
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let d = PretrainConfig::default();
        let c = PretrainConfig {
            lr: kv.get_or("lr", d.lr)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            seed: kv.get_or("seed", d.seed)?,
            max_steps: kv.get("max_steps")?,
        };
        if c.batch_size == 0 {
            return Err(XbmError::config("batch_size", "must be at least 1"));
        }
        Ok(c)
    }

    pub fn echo(&self) -> String {
        let mut s = format!(
            "lr = {}\nbatch_size = {}\nepochs = {}\nseed = {}\n",
            self.lr, self.batch_size, self.epochs, self.seed
        );
        if let Some(m) = self.max_steps {
            s.push_str(&format!("max_steps = {m}\n"));
        }
        s
    }
}

/// Initialization stream for the classifier of an XBM run.
pub fn classifier_rng(seed: u64) -> Rng {
    Rng::new(seed).substream(&[STREAM_INIT, 1])
}

/// Student bundle for a run: pretrained pair plus a fresh classifier.
pub fn init_bundle(encoder: &VisionEncoder, decoder: &ExplanationDecoder, config: &TrainConfig) -> Result<ModelBundle> {
    ModelBundle::from_pretrained(encoder, decoder, config.classifier_mode, &mut classifier_rng(config.seed))
}

/// The ablation row set: frozen baseline, a lambda sweep, initial
/// temperatures with and without annealing, and the l2sp regularizer.
/// Every row starts from `base`.
pub fn ablation_rows(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut rows = Vec::new();
    rows.push((
        "frozen".to_string(),
        TrainConfig {
            regularizer: Regularizer::None,
            freeze_backbone: true,
            lambda: 0.0,
            ..base.clone()
        },
    ));
    for lambda in [0.0, 0.01, 0.1, 1.0] {
        rows.push((
            format!("lambda={lambda}"),
            TrainConfig {
                regularizer: Regularizer::ExplanationDistillation,
                lambda,
                ..base.clone()
            },
        ));
    }
    let rate = if base.anneal_rate > 0.0 { base.anneal_rate } else { TrainConfig::default().anneal_rate };
    for tau0 in [1.0, 10.0, 100.0] {
        for (tag, r) in [("const", 0.0), ("anneal", rate)] {
            rows.push((
                format!("tau0={tau0}/{tag}"),
                TrainConfig {
                    tau0,
                    anneal_rate: r,
                    ..base.clone()
                },
            ));
        }
    }
    rows.push((
        "l2sp".to_string(),
        TrainConfig {
            regularizer: Regularizer::L2sp,
            ..base.clone()
        },
    ));
    rows
}

/// Deterministic minibatches: a fresh permutation per epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).substream(&[STREAM_SHUFFLE, epoch as u64]).shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Total optimizer steps of a run, after any cap.
pub fn planned_steps(n: usize, batch_size: usize, epochs: usize, cap: Option<usize>) -> usize {
    let per_epoch = n.div_ceil(batch_size.max(1));
    let total = per_epoch * epochs;
    cap.map_or(total, |c| total.min(c))
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub encoder: VisionEncoder,
    pub decoder: ExplanationDecoder,
    /// Mean teacher-forced loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Teacher-forced maximum-likelihood captioning over every position of the
/// padded captions (PAD after EOS included, so relaxed free-running
/// samples learn to pad).
pub fn pretrain_captioner(examples: &[Example], model: &ModelConfig, config: &PretrainConfig) -> Result<PretrainOutcome> {
    if examples.is_empty() {
        return Err(XbmError::Data("pretraining corpus is empty".into()));
    }
    if let Some(e) = examples.iter().find(|e| e.caption.is_none()) {
        return Err(XbmError::Data(format!("example {} has no caption; pretraining needs captions", e.id)));
    }
    let mut init = Rng::new(config.seed).substream(&[STREAM_INIT]);
    let mut encoder = VisionEncoder::new(model, &mut init)?;
    let mut decoder = ExplanationDecoder::new(model, &mut init)?;
    let mut opt = AdamW::new(AdamWConfig::default());
    let total = planned_steps(examples.len(), config.batch_size, config.epochs, config.max_steps);
    let mut step = 0;
    let mut epoch_losses = Vec::new();
    'outer: for epoch in 0..config.epochs {
        let mut sum = 0.0;
        let mut count = 0;
        for batch in epoch_batches(examples.len(), config.batch_size, config.seed, epoch) {
            if step >= total {
                break 'outer;
            }
            let ex: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
            let mut g = Graph::new();
            let images: Vec<&[f64]> = ex.iter().map(|e| e.image.as_slice()).collect();
            let h = encoder.encode(&mut g, &images)?;
            let mem = decoder.memory(&mut g, h)?;
            let caps: Vec<&TokenSequence> = ex.iter().map(|e| e.caption.as_ref().expect("checked")).collect();
            let logits = decoder.forward_targets(&mut g, &mem, &caps)?;
            let targets: Vec<usize> = caps.iter().flat_map(|c| c.ids().iter().copied()).collect();
            let loss = g.cross_entropy(logits, &targets)?;
            sum += g.value(loss).item()?;
            count += 1;
            g.backward(loss)?;
            encoder.store.accumulate_grads(&g);
            decoder.store.accumulate_grads(&g);
            let lr = cosine_lr(step, total, config.lr);
            opt.step(&mut [&mut encoder.store, &mut decoder.store], lr, Some(CLIP_NORM))?;
            step += 1;
        }
        epoch_losses.push(if count > 0 { sum / count as f64 } else { 0.0 });
    }
    Ok(PretrainOutcome {
        encoder,
        decoder,
        epoch_losses,
        steps: step,
    })
}

/// Prediction of a bundle on one image: beam explanation, then the
/// classifier on that explanation.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub explanation: TokenSequence,
    pub logits: Vec<f64>,
    pub class: usize,
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Classify a batch of images with given hard explanations.
pub fn classify_with(bundle: &ModelBundle, images: &[&[f64]], explanations: &[&TokenSequence]) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let ids: Vec<Vec<usize>> = explanations.iter().map(|e| e.ids().to_vec()).collect();
    let h = match bundle.classifier.mode() {
        ClassifierMode::Multimodal => Some(bundle.encoder.encode(&mut g, images)?),
        ClassifierMode::Text => None,
    };
    let out = bundle.classifier.forward(&mut g, h, Explanation::Hard(&ids))?;
    let t = g.value(out.logits);
    Ok((0..ids.len()).map(|r| t.row(r).to_vec()).collect())
}

pub fn predict(bundle: &ModelBundle, image: &[f64], beam_width: usize) -> Result<Prediction> {
    let explanation = explain(&bundle.encoder, &bundle.decoder, image, beam_width)?;
    let logits = classify_with(bundle, &[image], &[&explanation])?.remove(0);
    Ok(Prediction {
        class: argmax(&logits),
        logits,
        explanation,
    })
}

/// Beam explanations for a list of examples.
pub fn explain_all(encoder: &VisionEncoder, decoder: &ExplanationDecoder, examples: &[Example], width: usize) -> Result<Vec<TokenSequence>> {
    par_map(examples, |e| explain(encoder, decoder, &e.image, width)).into_iter().collect()
}

/// Accuracy of the bundle on examples, classifying in chunks.
pub fn accuracy(bundle: &ModelBundle, examples: &[Example], beam_width: usize) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let expl = explain_all(&bundle.encoder, &bundle.decoder, examples, beam_width)?;
    let mut correct = 0;
    for (chunk, ech) in examples.chunks(32).zip(expl.chunks(32)) {
        let images: Vec<&[f64]> = chunk.iter().map(|e| e.image.as_slice()).collect();
        let refs: Vec<&TokenSequence> = ech.iter().collect();
        let logits = classify_with(bundle, &images, &refs)?;
        correct += chunk.iter().zip(&logits).filter(|(e, l)| argmax(l) == e.label).count();
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Teacher references keyed by example id.
#[derive(Clone, Debug, Default)]
pub struct ReferenceCache {
    map: HashMap<u64, TokenSequence>,
}

impl ReferenceCache {
    pub fn get_or_generate(&mut self, bundle: &ModelBundle, example: &Example, width: usize, cache: bool) -> Result<TokenSequence> {
        if cache {
            if let Some(r) = self.map.get(&example.id) {
                return Ok(r.clone());
            }
        }
        let r = explain(&bundle.teacher_encoder, &bundle.teacher_decoder, &example.image, width)?;
        if cache {
            self.map.insert(example.id, r.clone());
        }
        Ok(r)
    }

    /// Generate every missing reference of `examples` in parallel and
    /// return them in order.
    pub fn get_or_generate_all(&mut self, bundle: &ModelBundle, examples: &[&Example], width: usize, cache: bool) -> Result<Vec<TokenSequence>> {
        let missing: Vec<&Example> = examples
            .iter()
            .copied()
            .filter(|e| !cache || !self.map.contains_key(&e.id))
            .collect();
        let fresh = par_map(&missing, |e| explain(&bundle.teacher_encoder, &bundle.teacher_decoder, &e.image, width))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        if !cache {
            return Ok(fresh);
        }
        for (e, r) in missing.iter().zip(fresh) {
            self.map.insert(e.id, r);
        }
        Ok(examples.iter().map(|e| self.map[&e.id].clone()).collect())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Mutable state of an XBM run.
pub struct Trainer {
    pub config: TrainConfig,
    pub bundle: ModelBundle,
    opt: AdamW,
    pub step: usize,
    pub total_steps: usize,
    pub references: ReferenceCache,
    pub clip_events: usize,
}

impl Trainer {
    pub fn new(mut bundle: ModelBundle, config: TrainConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        bundle.encoder.store.set_frozen(config.freeze_backbone);
        bundle.decoder.store.set_frozen(config.freeze_backbone);
        bundle.teacher_encoder.store.set_frozen(true);
        bundle.teacher_decoder.store.set_frozen(true);
        let opt = AdamW::new(AdamWConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        });
        Ok(Trainer {
            config,
            bundle,
            opt,
            step: 0,
            total_steps,
            references: ReferenceCache::default(),
            clip_events: 0,
        })
    }

    pub fn tau(&self) -> f64 {
        self.config.schedule().tau(self.step as u64)
    }

    /// Loss of one batch on a fresh graph, without updating anything.
    /// Returns the graph and the total-loss node alongside the breakdown.
    pub fn losses(&mut self, batch: &[&Example]) -> Result<(Graph, Var, LossBreakdown)> {
        let cfg = self.config.clone();
        let refs = match cfg.regularizer {
            Regularizer::ExplanationDistillation => {
                self.references
                    .get_or_generate_all(&self.bundle, batch, cfg.beam_width, cfg.cache_references)?
            }
            _ => Vec::new(),
        };
        let b = &self.bundle;
        let mut g = Graph::new();
        let images: Vec<&[f64]> = batch.iter().map(|e| e.image.as_slice()).collect();
        let h = b.encoder.encode(&mut g, &images)?;
        let mem = b.decoder.memory(&mut g, h)?;
        let noise_seed = Rng::new(cfg.seed).substream(&[STREAM_NOISE, self.step as u64]).next_u64();
        let noise = GumbelNoise::Seeded {
            seed: noise_seed,
            ids: batch.iter().map(|e| e.id).collect(),
        };
        let soft = crate::decoding::gumbel_softmax_sample(&mut g, &b.decoder, &mem, batch.len(), self.tau(), &noise)?;
        let out = b.classifier.forward(&mut g, Some(h), Explanation::Soft(soft))?;
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        let l_cls = classification_loss(&mut g, out.logits, &labels)?;
        let r_int = match cfg.regularizer {
            Regularizer::ExplanationDistillation => {
                let r: Vec<&TokenSequence> = refs.iter().collect();
                Some(distillation_loss(&mut g, &b.decoder, &mem, &r, cfg.distill_norm)?)
            }
            Regularizer::L2sp => Some(l2sp(
                &mut g,
                &[&b.encoder.store, &b.decoder.store],
                &[&b.teacher_encoder.store, &b.teacher_decoder.store],
            )?),
            Regularizer::None => None,
        };
        let total = match r_int {
            Some(r) if cfg.lambda > 0.0 => {
                let scaled = g.scale(r, cfg.lambda)?;
                g.add(l_cls, scaled)?
            }
            _ => l_cls,
        };
        let l = g.value(l_cls).item()?;
        let r = match r_int {
            Some(r) => g.value(r).item()?,
            None => 0.0,
        };
        let breakdown = LossBreakdown {
            l_cls: l,
            r_int: r,
            lambda: cfg.lambda,
            total: g.value(total).item()?,
        };
        Ok((g, total, breakdown))
    }

    /// One joint update of classifier, decoder and encoder.
    pub fn train_step(&mut self, batch: &[&Example]) -> Result<LossBreakdown> {
        let (mut g, total, breakdown) = self.losses(batch)?;
        g.backward(total)?;
        let b = &mut self.bundle;
        for s in [&mut b.encoder.store, &mut b.decoder.store, &mut b.classifier.store] {
            if !s.is_frozen() {
                s.accumulate_grads(&g);
            }
        }
        let lr = cosine_lr(self.step, self.total_steps, self.config.lr);
        let info = self.opt.step(
            &mut [&mut b.encoder.store, &mut b.decoder.store, &mut b.classifier.store],
            lr,
            Some(CLIP_NORM),
        )?;
        if info.clipped {
            self.clip_events += 1;
        }
        self.step += 1;
        Ok(breakdown)
    }
}

/// One line of the metrics stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_cls: f64,
    pub r_int: f64,
    pub total: f64,
    pub val_acc: f64,
    pub tau: f64,
}

impl EpochMetrics {
    pub const HEADER: &'static str = "epoch\tL_cls\tR_int\ttotal\tval_acc\ttau";

    pub fn line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.6}",
            self.epoch, self.l_cls, self.r_int, self.total, self.val_acc, self.tau
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Student snapshot with the best validation accuracy.
    pub bundle: ModelBundle,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub metrics: Vec<EpochMetrics>,
    pub steps: usize,
    pub clip_events: usize,
}

/// Full XBM loop with per-epoch validation and best-validation selection.
/// `on_epoch` sees each metrics line as it is produced.
pub fn train_xbm(
    bundle: ModelBundle,
    train: &[Example],
    val: &[Example],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(XbmError::Data("training split is empty".into()));
    }
    let total = planned_steps(train.len(), config.batch_size, config.epochs, config.max_steps);
    let mut t = Trainer::new(bundle, config.clone(), total)?;
    let mut best = (t.bundle.clone(), 0usize, f64::NEG_INFINITY);
    let mut metrics = Vec::new();
    for epoch in 0..config.epochs {
        if t.step >= total {
            break;
        }
        let (mut sl, mut sr, mut st, mut n) = (0.0, 0.0, 0.0, 0usize);
        for batch in epoch_batches(train.len(), config.batch_size, config.seed, epoch) {
            if t.step >= total {
                break;
            }
            let ex: Vec<&Example> = batch.iter().map(|&i| &train[i]).collect();
            let lb = t.train_step(&ex)?;
            sl += lb.l_cls;
            sr += lb.r_int;
            st += lb.total;
            n += 1;
        }
        let val_acc = accuracy(&t.bundle, val, config.beam_width)?;
        let nf = n.max(1) as f64;
        let m = EpochMetrics {
            epoch,
            l_cls: sl / nf,
            r_int: sr / nf,
            total: st / nf,
            val_acc,
            tau: t.tau(),
        };
        on_epoch(&m);
        metrics.push(m);
        if val_acc > best.2 {
            best = (t.bundle.clone(), epoch, val_acc);
        }
    }
    Ok(TrainOutcome {
        bundle: best.0,
        best_epoch: best.1,
        best_val_acc: best.2.max(0.0),
        metrics,
        steps: t.step,
        clip_events: t.clip_events,
    })
}

/// Append-only record of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config_echo: String,
    pub code_version: String,
    entries: Vec<(String, String)>,
    metrics: Vec<String>,
    seeds: Vec<(String, u64)>,
}

impl RunManifest {
    pub fn new(command: &str, config_echo: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            config_echo: config_echo.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            ..RunManifest::default()
        }
    }

    /// Record a named value (checksum, path, count).
    pub fn record(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.push((name.to_string(), seed));
    }

    pub fn metric_line(&mut self, line: String) {
        self.metrics.push(line);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn metrics(&self) -> &[String] {
        &self.metrics
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# run manifest\ncommand = {}\ncode_version = {}\n",
            self.command, self.code_version
        );
        for (k, v) in &self.entries {
            s.push_str(&format!("{k} = {v}\n"));
        }
        for (k, v) in &self.seeds {
            s.push_str(&format!("seed.{k} = {v}\n"));
        }
        s.push_str("\n[config]\n");
        s.push_str(&self.config_echo);
        if !self.metrics.is_empty() {
            s.push_str("\n[metrics]\n");
            s.push_str(EpochMetrics::HEADER);
            s.push('\n');
            for m in &self.metrics {
                s.push_str(m);
                s.push('\n');
            }
        }
        s
    }

    /// Recover recorded entries from [`RunManifest::to_text`] output.
    pub fn parse_entries(text: &str) -> Vec<(String, String)> {
        text.lines()
            .take_while(|l| !l.starts_with('['))
            .filter(|l| !l.starts_with('#'))
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }
}
