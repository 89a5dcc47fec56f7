//! Frozen judges and evaluation reports.
//!
//! The alignment score is the cosine between image and text embeddings of a
//! contrastively trained dual encoder; fluency is perplexity under a small
//! caption language model. Both are trained once per corpus and checksummed
//! so every row of a comparison is scored by the same judges.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autodiff::{cosine_lr, hex, AdamW, AdamWConfig, Graph, ParamId, ParamStore, Var};
use crate::error::{Result, XbmError};
use crate::interpret::{analyze, concentrates_on, cross_attention_heatmap, segmentation_eval, HeadAggregation, Heatmap, SegmentationReport};
use crate::io::KvConfig;
use crate::nn::checkpoint::Checkpoint;
use crate::nn::layers::{Linear, Stack};
use crate::nn::text::{TokenSequence, BOS, CLS, PAD};
use crate::nn::{ClassifierMode, ModelBundle, ModelConfig, VisionEncoder};
use crate::par::par_map;
use crate::rng::Rng;
use crate::training::{argmax, classify_with, epoch_batches, planned_steps, CLIP_NORM};
use crate::worldgen::Example;
use crate::decoding::explain;

pub const CONTRASTIVE_TEMPERATURE: f64 = 0.07;

const EMBED_STD: f64 = 0.5;
const POS_STD: f64 = 0.1;

/// Image and text towers mapping into a shared unit-norm embedding space.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    config: ModelConfig,
    pub image: VisionEncoder,
    /// Text tower and both projections.
    pub store: ParamStore,
    image_proj: Linear,
    tok: ParamId,
    pos: ParamId,
    stack: Stack,
    text_proj: Linear,
    pub temperature: f64,
}

impl DualEncoder {
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let c = config;
        let image = VisionEncoder::new(c, rng)?;
        let mut store = ParamStore::new();
        let image_proj = Linear::new(&mut store, "image_proj", c.d_model, c.d_model, rng);
        let tok = store.add_normal("tok", &[c.vocab_size, c.d_model], EMBED_STD, rng);
        let pos = store.add_normal("pos", &[c.max_len + 1, c.d_model], POS_STD, rng);
        let stack = Stack::new(&mut store, "text", c.d_model, c.depth, c.heads, c.mlp_hidden, false, false, rng);
        let text_proj = Linear::new(&mut store, "text_proj", c.d_model, c.d_model, rng);
        Ok(DualEncoder {
            config: c.clone(),
            image,
            store,
            image_proj,
            tok,
            pos,
            stack,
            text_proj,
            temperature: CONTRASTIVE_TEMPERATURE,
        })
    }

    /// Mean-pooled image tokens, projected and normalized: `[B, d]`.
    pub fn embed_images(&self, g: &mut Graph, images: &[&[f64]]) -> Result<Var> {
        let h = self.image.encode(g, images)?;
        let pooled = g.mean_axis(h, 1)?;
        let z = self.image_proj.forward(g, &self.store, pooled)?;
        g.l2_normalize(z)
    }

    /// `[CLS]`-pooled text, projected and normalized: `[B, d]`.
    pub fn embed_texts(&self, g: &mut Graph, texts: &[&TokenSequence]) -> Result<Var> {
        let d = self.config.d_model;
        let n = texts.first().map_or(0, |t| t.max_len()) + 1;
        if texts.is_empty() || texts.iter().any(|t| t.max_len() + 1 != n) || n > self.config.max_len + 1 {
            return Err(XbmError::shape("text-embed", format!("{} texts of mixed or oversized length", texts.len())));
        }
        let flat: Vec<usize> = texts.iter().flat_map(|t| std::iter::once(CLS).chain(t.ids().iter().copied())).collect();
        if flat.iter().any(|&t| t >= self.config.vocab_size) {
            return Err(XbmError::shape("text-embed", "token outside the vocabulary".to_string()));
        }
        let table = g.param(&self.store, self.tok)?;
        let e = g.gather(table, &flat)?;
        let e = g.reshape(e, &[texts.len(), n, d])?;
        let pos = g.param(&self.store, self.pos)?;
        let pos = g.slice(pos, 0, 0, n)?;
        let x = g.add(e, pos)?;
        let out = self.stack.forward(g, &self.store, x, None)?;
        let cls = g.slice(out.out, 1, 0, 1)?;
        let cls = g.reshape(cls, &[texts.len(), d])?;
        let z = self.text_proj.forward(g, &self.store, cls)?;
        g.l2_normalize(z)
    }

    /// Symmetric InfoNCE over a batch of matched pairs.
    pub fn contrastive_loss(&self, g: &mut Graph, images: Var, texts: Var) -> Result<Var> {
        let b = g.shape(images)[0];
        let tt = g.transpose(texts)?;
        let sim = g.matmul(images, tt)?;
        let logits = g.scale(sim, 1.0 / self.temperature)?;
        let logits_t = g.transpose(logits)?;
        let diag: Vec<usize> = (0..b).collect();
        let a = g.cross_entropy(logits, &diag)?;
        let c = g.cross_entropy(logits_t, &diag)?;
        let s = g.add(a, c)?;
        g.scale(s, 0.5)
    }

    /// Cosine of the two unit embeddings for each (image, text) pair.
    pub fn scores(&self, images: &[&[f64]], texts: &[&TokenSequence]) -> Result<Vec<f64>> {
        if images.len() != texts.len() {
            return Err(XbmError::Invalid("one text per image required".into()));
        }
        let mut g = Graph::new();
        let zi = self.embed_images(&mut g, images)?;
        let zt = self.embed_texts(&mut g, texts)?;
        let (a, b) = (g.value(zi), g.value(zt));
        Ok((0..images.len()).map(|r| dot(a.row(r), b.row(r)).clamp(-1.0, 1.0)).collect())
    }

    /// Cosine matrix `[images, texts]`.
    pub fn score_matrix(&self, images: &[&[f64]], texts: &[&TokenSequence]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let zi = self.embed_images(&mut g, images)?;
        let zt = self.embed_texts(&mut g, texts)?;
        let (a, b) = (g.value(zi), g.value(zt));
        Ok((0..images.len())
            .map(|i| (0..texts.len()).map(|j| dot(a.row(i), b.row(j)).clamp(-1.0, 1.0)).collect())
            .collect())
    }

    fn stores_mut(&mut self) -> [&mut ParamStore; 2] {
        [&mut self.image.store, &mut self.store]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Alignment of one image and explanation. An explanation with no content
/// tokens scores 0, as if its embedding were the zero vector.
pub fn alignment_score(dual: &DualEncoder, image: &[f64], text: &TokenSequence) -> Result<f64> {
    if text.content().is_empty() {
        return Ok(0.0);
    }
    Ok(dual.scores(&[image], &[text])?[0])
}

/// Causal caption language model, BOS-conditioned, no image input.
#[derive(Clone, Debug)]
pub struct ReferenceLM {
    config: ModelConfig,
    pub store: ParamStore,
    tok: ParamId,
    pos: ParamId,
    stack: Stack,
    head: Linear,
}

impl ReferenceLM {
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut store = ParamStore::new();
        let tok = store.add_normal("tok", &[c.vocab_size, c.d_model], EMBED_STD, rng);
        let pos = store.add_normal("pos", &[c.max_len, c.d_model], POS_STD, rng);
        let stack = Stack::new(&mut store, "lm", c.d_model, c.depth, c.heads, c.mlp_hidden, true, false, rng);
        let head = Linear::new(&mut store, "head", c.d_model, c.vocab_size, rng);
        Ok(ReferenceLM {
            config: c.clone(),
            store,
            tok,
            pos,
            stack,
            head,
        })
    }

    /// Next-token logits `[B, L, V]` for inputs `BOS + ids[..L-1]`.
    pub fn logits(&self, g: &mut Graph, texts: &[&TokenSequence]) -> Result<Var> {
        let l = texts.first().map_or(0, |t| t.max_len());
        if texts.is_empty() || l == 0 || l > self.config.max_len || texts.iter().any(|t| t.max_len() != l) {
            return Err(XbmError::shape("reference-lm", format!("{} texts of mixed or oversized length", texts.len())));
        }
        let flat: Vec<usize> = texts
            .iter()
            .flat_map(|t| std::iter::once(BOS).chain(t.ids()[..l - 1].iter().copied()))
            .collect();
        if flat.iter().any(|&t| t >= self.config.vocab_size) {
            return Err(XbmError::shape("reference-lm", "token outside the vocabulary".to_string()));
        }
        let d = self.config.d_model;
        let table = g.param(&self.store, self.tok)?;
        let e = g.gather(table, &flat)?;
        let e = g.reshape(e, &[texts.len(), l, d])?;
        let pos = g.param(&self.store, self.pos)?;
        let pos = g.slice(pos, 0, 0, l)?;
        let x = g.add(e, pos)?;
        let out = self.stack.forward(g, &self.store, x, None)?;
        self.head.forward(g, &self.store, out.out)
    }

    /// Mean next-token NLL over the non-PAD positions of each text, with
    /// the loss node averaging over texts.
    fn nll(&self, g: &mut Graph, texts: &[&TokenSequence]) -> Result<(Var, Vec<f64>)> {
        let logits = self.logits(g, texts)?;
        let targets: Vec<usize> = texts.iter().flat_map(|t| t.ids().iter().copied()).collect();
        let mut weights = Vec::with_capacity(targets.len());
        for t in texts {
            let n = t.non_pad_len().max(1) as f64;
            weights.extend(t.ids().iter().map(|&id| if id == PAD { 0.0 } else { 1.0 / (n * texts.len() as f64) }));
        }
        let loss = g.cross_entropy_weighted(logits, &targets, &weights)?;
        // per-text values from the forward logits
        let lt = g.value(logits);
        let l = texts[0].max_len();
        let per_text = texts
            .iter()
            .enumerate()
            .map(|(b, t)| {
                let mut sum = 0.0;
                for (p, &id) in t.ids().iter().enumerate() {
                    if id == PAD {
                        continue;
                    }
                    let row = lt.row(b * l + p);
                    sum += log_sum_exp(row) - row[id];
                }
                sum / t.non_pad_len().max(1) as f64
            })
            .collect();
        Ok((loss, per_text))
    }

    /// Perplexity of each text: `exp` of the mean next-token NLL over
    /// content tokens and EOS. Texts without content are an error.
    pub fn perplexities(&self, texts: &[&TokenSequence]) -> Result<Vec<f64>> {
        if let Some(t) = texts.iter().find(|t| t.content().is_empty()) {
            return Err(XbmError::Invalid(format!("perplexity of empty text ({} tokens)", t.max_len())));
        }
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(64) {
            let mut g = Graph::new();
            let (_, per) = self.nll(&mut g, chunk)?;
            out.extend(per.into_iter().map(f64::exp));
        }
        Ok(out)
    }

    pub fn perplexity(&self, text: &TokenSequence) -> Result<f64> {
        Ok(self.perplexities(&[text])?[0])
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct JudgeConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub max_steps: Option<usize>,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            lr: 2e-3,
            batch_size: 32,
            epochs: 6,
            seed: 0,
            max_steps: None,
        }
    }
}

impl JudgeConfig {
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let d = JudgeConfig::default();
        let c = JudgeConfig {
            lr: kv.get_or("lr", d.lr)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            epochs: kv.get_or("epochs", d.epochs)?,
            seed: kv.get_or("seed", d.seed)?,
            max_steps: kv.get("max_steps")?,
        };
        if c.batch_size < 2 {
            return Err(XbmError::config("batch_size", "contrastive training needs at least 2"));
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

/// The frozen evaluation judges.
#[derive(Clone, Debug)]
pub struct Judges {
    pub dual: DualEncoder,
    pub lm: ReferenceLM,
}

const STREAM_JUDGE_INIT: u64 = 11;
const STREAM_JUDGE_SHUFFLE: u64 = 12;

impl Judges {
    /// Untrained judges with the deterministic initialization of `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed).substream(&[STREAM_JUDGE_INIT]);
        let dual = DualEncoder::new(config, &mut rng)?;
        let lm = ReferenceLM::new(config, &mut rng)?;
        Ok(Judges { dual, lm })
    }

    /// SHA-256 over all judge parameters.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in [&self.dual.image.store, &self.dual.store, &self.lm.store] {
            h.update(s.checksum().as_bytes());
        }
        hex(&h.finalize())
    }

    pub fn to_checkpoint(&self, config: &ModelConfig) -> Checkpoint {
        let mut c = Checkpoint::new(config.echo());
        c.add_tree("judge.image", &self.dual.image.store);
        c.add_tree("judge.text", &self.dual.store);
        c.add_tree("judge.lm", &self.lm.store);
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_echo(&ckpt.config_echo)?;
        let mut j = Judges::init(&config, 0)?;
        ckpt.load_into("judge.image", &mut j.dual.image.store)?;
        ckpt.load_into("judge.text", &mut j.dual.store)?;
        ckpt.load_into("judge.lm", &mut j.lm.store)?;
        j.freeze();
        Ok(j)
    }

    pub fn write(&self, config: &ModelConfig, path: &Path) -> Result<()> {
        self.to_checkpoint(config).write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Judges::from_checkpoint(&Checkpoint::read(path)?)
    }

    fn freeze(&mut self) {
        self.dual.image.store.set_frozen(true);
        self.dual.store.set_frozen(true);
        self.lm.store.set_frozen(true);
    }
}

/// Mean losses per judge epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct JudgeHistory {
    pub contrastive: Vec<f64>,
    pub lm: Vec<f64>,
}

/// Train both judges on the captioned corpus and freeze them.
pub fn train_judges(examples: &[Example], model: &ModelConfig, config: &JudgeConfig) -> Result<(Judges, JudgeHistory)> {
    if examples.is_empty() {
        return Err(XbmError::Data("judge corpus is empty".into()));
    }
    if let Some(e) = examples.iter().find(|e| e.caption.is_none()) {
        return Err(XbmError::Data(format!("example {} has no caption; judges need captions", e.id)));
    }
    let mut j = Judges::init(model, config.seed)?;
    let mut opt_dual = AdamW::new(AdamWConfig::default());
    let mut opt_lm = AdamW::new(AdamWConfig::default());
    let total = planned_steps(examples.len(), config.batch_size, config.epochs, config.max_steps);
    let shuffle_seed = Rng::new(config.seed).substream(&[STREAM_JUDGE_SHUFFLE]).next_u64();
    let mut history = JudgeHistory {
        contrastive: Vec::new(),
        lm: Vec::new(),
    };
    let mut step = 0;
    'outer: for epoch in 0..config.epochs {
        let (mut sc, mut sl, mut n) = (0.0, 0.0, 0usize);
        for batch in epoch_batches(examples.len(), config.batch_size, shuffle_seed, epoch) {
            if step >= total {
                break 'outer;
            }
            let lr = cosine_lr(step, total, config.lr);
            let images: Vec<&[f64]> = batch.iter().map(|&i| examples[i].image.as_slice()).collect();
            let caps: Vec<&TokenSequence> = batch.iter().map(|&i| examples[i].caption.as_ref().expect("checked")).collect();
            if batch.len() >= 2 {
                let mut g = Graph::new();
                let zi = j.dual.embed_images(&mut g, &images)?;
                let zt = j.dual.embed_texts(&mut g, &caps)?;
                let loss = j.dual.contrastive_loss(&mut g, zi, zt)?;
                sc += g.value(loss).item()?;
                g.backward(loss)?;
                let [a, b] = j.dual.stores_mut();
                a.accumulate_grads(&g);
                b.accumulate_grads(&g);
                opt_dual.step(&mut [a, b], lr, Some(CLIP_NORM))?;
            }
            let mut g = Graph::new();
            let (loss, _) = j.lm.nll(&mut g, &caps)?;
            sl += g.value(loss).item()?;
            g.backward(loss)?;
            j.lm.store.accumulate_grads(&g);
            opt_lm.step(&mut [&mut j.lm.store], lr, Some(CLIP_NORM))?;
            n += 1;
            step += 1;
        }
        let d = n.max(1) as f64;
        history.contrastive.push(sc / d);
        history.lm.push(sl / d);
    }
    j.freeze();
    Ok((j, history))
}

/// Mean per-explanation fraction of distinct content tokens. Empty
/// explanations count as 0.
pub fn unique_token_ratio(texts: &[TokenSequence]) -> f64 {
    if texts.is_empty() {
        return 0.0;
    }
    let sum: f64 = texts
        .iter()
        .map(|t| {
            let c = t.content();
            if c.is_empty() {
                return 0.0;
            }
            let mut u = c.to_vec();
            u.sort_unstable();
            u.dedup();
            u.len() as f64 / c.len() as f64
        })
        .sum();
    sum / texts.len() as f64
}

pub const DEGENERATE_UNIQUE_RATIO: f64 = 0.2;
pub const DEGENERATE_PERPLEXITY_FACTOR: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Degeneration {
    pub unique_token_ratio: f64,
    pub perplexity: f64,
    pub reference_perplexity: Option<f64>,
    pub fired: bool,
}

/// Collapse detector: low token diversity, or perplexity far above a
/// reference run's.
pub fn detect_degeneration(unique_token_ratio: f64, perplexity: f64, reference_perplexity: Option<f64>) -> Degeneration {
    let ppl_fired = reference_perplexity.is_some_and(|r| perplexity > DEGENERATE_PERPLEXITY_FACTOR * r);
    Degeneration {
        unique_token_ratio,
        perplexity,
        reference_perplexity,
        fired: unique_token_ratio < DEGENERATE_UNIQUE_RATIO || ppl_fired || !perplexity.is_finite(),
    }
}

/// Evaluation of one model on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub row_label: String,
    pub examples: usize,
    pub correct: usize,
    pub test_acc: f64,
    /// Mean over all examples; empty generations contribute 0.
    pub alignment: f64,
    pub alignment_count: usize,
    /// Mean over non-empty generations.
    pub perplexity: f64,
    pub perplexity_count: usize,
    pub empty_generations: usize,
    pub unique_token_ratio: f64,
    /// `None` for a text-mode classifier.
    pub segmentation: Option<SegmentationReport>,
    /// Share of images whose heatmap is hotter inside the target mask.
    pub concentration: Option<f64>,
    pub judge_checksum: String,
}

#[derive(Clone, Debug)]
pub struct EvalArtifacts {
    pub explanations: Vec<TokenSequence>,
    pub predictions: Vec<usize>,
    pub heatmaps: Vec<Heatmap>,
}

/// Sequential mean with a fixed summation order.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Accuracy, judge scores and heatmap segmentation of `bundle` on
/// `examples`, explaining each image by beam search.
pub fn evaluate(bundle: &ModelBundle, examples: &[Example], judges: &Judges, beam_width: usize, row_label: &str) -> Result<(EvalReport, EvalArtifacts)> {
    if examples.is_empty() {
        return Err(XbmError::Data("evaluation split is empty".into()));
    }
    let explanations = par_map(examples, |e| explain(&bundle.encoder, &bundle.decoder, &e.image, beam_width))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut predictions = Vec::with_capacity(examples.len());
    for (chunk, ech) in examples.chunks(32).zip(explanations.chunks(32)) {
        let images: Vec<&[f64]> = chunk.iter().map(|e| e.image.as_slice()).collect();
        let refs: Vec<&TokenSequence> = ech.iter().collect();
        predictions.extend(classify_with(bundle, &images, &refs)?.iter().map(|l| argmax(l)));
    }
    let correct = predictions.iter().zip(examples).filter(|(p, e)| **p == e.label).count();

    let mut alignments = vec![0.0; examples.len()];
    let nonempty: Vec<usize> = (0..examples.len()).filter(|&i| !explanations[i].content().is_empty()).collect();
    for chunk in nonempty.chunks(64) {
        let images: Vec<&[f64]> = chunk.iter().map(|&i| examples[i].image.as_slice()).collect();
        let texts: Vec<&TokenSequence> = chunk.iter().map(|&i| &explanations[i]).collect();
        for (&i, s) in chunk.iter().zip(judges.dual.scores(&images, &texts)?) {
            alignments[i] = s;
        }
    }
    let texts: Vec<&TokenSequence> = nonempty.iter().map(|&i| &explanations[i]).collect();
    let ppl = judges.lm.perplexities(&texts)?;

    let (segmentation, concentration, heatmaps) = if bundle.classifier.mode() == ClassifierMode::Multimodal {
        let heatmaps = par_map(&(0..examples.len()).collect::<Vec<_>>(), |&i| {
            let a = analyze(bundle, &examples[i].image, &explanations[i], HeadAggregation::Mean)?;
            cross_attention_heatmap(&a, None)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let masks: Vec<&[bool]> = examples.iter().map(|e| e.target_mask()).collect();
        let seg = segmentation_eval(&heatmaps, &masks)?;
        let hits = heatmaps.iter().zip(&masks).filter(|(h, m)| concentrates_on(h, m)).count();
        (Some(seg), Some(hits as f64 / examples.len() as f64), heatmaps)
    } else {
        (None, None, Vec::new())
    };

    let report = EvalReport {
        row_label: row_label.to_string(),
        examples: examples.len(),
        correct,
        test_acc: correct as f64 / examples.len() as f64,
        alignment: mean(&alignments),
        alignment_count: alignments.len(),
        perplexity: mean(&ppl),
        perplexity_count: ppl.len(),
        empty_generations: examples.len() - nonempty.len(),
        unique_token_ratio: unique_token_ratio(&explanations),
        segmentation,
        concentration,
        judge_checksum: judges.checksum(),
    };
    Ok((
        report,
        EvalArtifacts {
            explanations,
            predictions,
            heatmaps,
        },
    ))
}

pub const REPORT_HEADER: &str = "row_label\ttest_acc\talignment\tperplexity\tpixel_acc\tmiou\tmap\tjudge_checksum";

impl EvalReport {
    pub fn tsv_row(&self) -> String {
        let (pa, mi, ap) = match &self.segmentation {
            Some(s) => (fmt(s.pixel_accuracy), fmt(s.miou), fmt(s.map)),
            None => ("nan".into(), "nan".into(), "nan".into()),
        };
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.row_label,
            fmt(self.test_acc),
            fmt(self.alignment),
            fmt(self.perplexity),
            pa,
            mi,
            ap,
            self.judge_checksum
        )
    }

    /// Counts behind each mean, as `key = value` lines.
    pub fn counts(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "examples = {}", self.examples);
        let _ = writeln!(s, "correct = {}", self.correct);
        let _ = writeln!(s, "alignment_count = {}", self.alignment_count);
        let _ = writeln!(s, "perplexity_count = {}", self.perplexity_count);
        let _ = writeln!(s, "empty_generations = {}", self.empty_generations);
        let _ = writeln!(s, "unique_token_ratio = {}", fmt(self.unique_token_ratio));
        if let Some(seg) = &self.segmentation {
            let _ = writeln!(s, "segmentation_evaluated = {}", seg.evaluated);
            let _ = writeln!(s, "segmentation_skipped_empty = {}", seg.skipped_empty);
        }
        if let Some(c) = self.concentration {
            let _ = writeln!(s, "concentration = {}", fmt(c));
        }
        s
    }
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "nan".into()
    }
}

/// Header plus one row per report.
pub fn report_tsv(rows: &[EvalReport]) -> String {
    let mut s = String::from(REPORT_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.tsv_row());
        s.push('\n');
    }
    s
}
