//! Explanation styles and probes: concept phrases scored by classifier
//! [CLS] attention, cross-attention heatmaps, heatmap segmentation metrics,
//! and explanation interventions.

use std::fmt::Write as _;

use crate::autodiff::{Graph, Tensor};
use crate::error::{Result, XbmError};
use crate::nn::text::{TokenSequence, Vocabulary, EOS, PAD};
use crate::nn::{ClassifierMode, Explanation, ModelBundle};
use crate::rng::Rng;
use crate::training::{argmax, classify_with};
use crate::worldgen::{Example, Shape, Size};

const DETERMINERS: [&str; 2] = ["a", "the"];
const POSITIONS: [&str; 6] = ["top", "middle", "bottom", "left", "center", "right"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhraseKind {
    /// Determiner, size, color, shape noun.
    Object,
    /// Determiner and position nouns.
    Position,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptPhrase {
    /// Token span `[start, end)` within the explanation.
    pub start: usize,
    pub end: usize,
    pub kind: PhraseKind,
    pub text: String,
    pub score: f64,
}

fn word<'v>(vocab: &'v Vocabulary, id: usize) -> &'v str {
    vocab.token(id).unwrap_or("")
}

fn is_shape(w: &str) -> bool {
    Shape::ALL.iter().any(|s| s.word() == w)
}

fn is_size(w: &str) -> bool {
    Size::ALL.iter().any(|s| s.word() == w)
}

fn is_color(w: &str) -> bool {
    crate::worldgen::Color::ALL.iter().any(|c| c.word() == w)
}

/// Deterministic chunker over the caption grammar. Object phrases match
/// `det? size? color? shape`, position phrases match `det? position+`.
/// Tokens outside any match produce no phrase. Scores are zero.
pub fn extract_concept_phrases(tokens: &[usize], vocab: &Vocabulary) -> Vec<ConceptPhrase> {
    let end_of_content = tokens.iter().position(|&t| t == EOS || t == PAD).unwrap_or(tokens.len());
    let w: Vec<&str> = tokens[..end_of_content].iter().map(|&t| word(vocab, t)).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < w.len() {
        let mut j = i;
        if DETERMINERS.contains(&w[j]) {
            j += 1;
        }
        let after_det = j;
        if j < w.len() && is_size(w[j]) {
            j += 1;
        }
        if j < w.len() && is_color(w[j]) {
            j += 1;
        }
        if j < w.len() && is_shape(w[j]) {
            out.push(phrase(&w, i, j + 1, PhraseKind::Object));
            i = j + 1;
            continue;
        }
        let mut k = after_det;
        while k < w.len() && POSITIONS.contains(&w[k]) {
            k += 1;
        }
        if k > after_det {
            out.push(phrase(&w, i, k, PhraseKind::Position));
            i = k;
            continue;
        }
        i += 1;
    }
    out
}

fn phrase(words: &[&str], start: usize, end: usize, kind: PhraseKind) -> ConceptPhrase {
    ConceptPhrase {
        start,
        end,
        kind,
        text: words[start..end].join(" "),
        score: 0.0,
    }
}

/// How attention heads are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum HeadAggregation {
    #[default]
    Mean,
    Max,
}

/// Classifier attention read out for one image and explanation.
#[derive(Clone, Debug)]
pub struct Analysis {
    pub explanation: TokenSequence,
    pub logits: Vec<f64>,
    /// Zero-based layer the maps come from.
    pub layer: usize,
    /// [CLS]-row self-attention over classifier positions (`[CLS]` first).
    pub cls_attention: Vec<f64>,
    /// Per explanation position, cross-attention onto image tokens; empty
    /// for a text-mode classifier.
    pub cross_attention: Vec<Vec<f64>>,
    pub grid: (usize, usize),
    pub image_size: (usize, usize),
}

fn aggregate(w: &Tensor, row: usize, agg: HeadAggregation) -> Vec<f64> {
    // w: [1, heads, n, m]
    let s = w.shape();
    let (heads, n, m) = (s[1], s[2], s[3]);
    let mut out = match agg {
        HeadAggregation::Mean => vec![0.0; m],
        HeadAggregation::Max => vec![f64::NEG_INFINITY; m],
    };
    for h in 0..heads {
        let r = &w.data()[(h * n + row) * m..][..m];
        for (o, &x) in out.iter_mut().zip(r) {
            match agg {
                HeadAggregation::Mean => *o += x / heads as f64,
                HeadAggregation::Max => *o = o.max(x),
            }
        }
    }
    out
}

/// Run the classifier on one image and explanation and keep the attention
/// maps of the middle layer `ceil(depth / 2)`.
pub fn analyze(bundle: &ModelBundle, image: &[f64], explanation: &TokenSequence, agg: HeadAggregation) -> Result<Analysis> {
    let c = &bundle.config;
    let mut g = Graph::new();
    let ids = vec![explanation.ids().to_vec()];
    let h = match bundle.classifier.mode() {
        ClassifierMode::Multimodal => Some(bundle.encoder.encode(&mut g, &[image])?),
        ClassifierMode::Text => None,
    };
    let out = bundle.classifier.forward(&mut g, h, Explanation::Hard(&ids))?;
    let layer = c.middle_layer();
    let sw = g.attention_weights(out.self_attention[layer])?;
    let cls_attention = aggregate(&sw, 0, agg);
    let cross_attention = match out.cross_attention.get(layer) {
        Some(&v) => {
            let cw = g.attention_weights(v)?;
            (0..ids[0].len()).map(|p| aggregate(&cw, p + 1, agg)).collect()
        }
        None => Vec::new(),
    };
    Ok(Analysis {
        explanation: explanation.clone(),
        logits: g.value(out.logits).row(0).to_vec(),
        layer,
        cls_attention,
        cross_attention,
        grid: (c.height / c.patch, c.width / c.patch),
        image_size: (c.height, c.width),
    })
}

/// Concept phrases scored by [CLS] attention mass over their tokens,
/// renormalized over phrases and sorted by descending score.
pub fn phrase_scores(analysis: &Analysis, vocab: &Vocabulary) -> Vec<ConceptPhrase> {
    let mut phrases = extract_concept_phrases(analysis.explanation.ids(), vocab);
    let mass: Vec<f64> = phrases
        .iter()
        .map(|p| (p.start..p.end).map(|i| analysis.cls_attention[i + 1]).sum())
        .collect();
    let total: f64 = mass.iter().sum();
    for (p, m) in phrases.iter_mut().zip(&mass) {
        p.score = if total > 0.0 { m / total } else { 1.0 / mass.len() as f64 };
    }
    phrases.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.start.cmp(&b.start)));
    phrases
}

/// Pixel scores `H x W`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Source span, or `None` for the whole explanation.
    pub span: Option<(usize, usize)>,
}

impl Heatmap {
    /// Binary PGM (P5), 8-bit.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn flip_horizontal(&self) -> Heatmap {
        let mut values = self.values.clone();
        for row in values.chunks_mut(self.width) {
            row.reverse();
        }
        Heatmap { values, ..self.clone() }
    }
}

/// Binary PPM (P6) of an HWC image in `[0, 1]`.
pub fn image_to_ppm(image: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend(image.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Explanation positions the heatmap averages over: a span, or every
/// non-PAD position (content and EOS).
fn heat_rows(analysis: &Analysis, span: Option<(usize, usize)>) -> Result<Vec<usize>> {
    if analysis.cross_attention.is_empty() {
        return Err(XbmError::Invalid("text-mode classifier has no cross-attention".into()));
    }
    let n = analysis.explanation.non_pad_len();
    let rows: Vec<usize> = match span {
        Some((s, e)) if s < e && e <= analysis.cross_attention.len() => (s..e).collect(),
        Some((s, e)) => return Err(XbmError::Invalid(format!("span {s}..{e} outside the explanation"))),
        None => (0..n).collect(),
    };
    Ok(rows)
}

/// Unnormalized token-grid heat: mean cross-attention of `rows`.
pub fn token_heat(analysis: &Analysis, rows: &[usize]) -> Result<Vec<f64>> {
    if analysis.cross_attention.is_empty() {
        return Err(XbmError::Invalid("text-mode classifier has no cross-attention".into()));
    }
    let t = analysis.grid.0 * analysis.grid.1;
    let mut heat = vec![0.0; t];
    for &r in rows {
        for (h, &a) in heat.iter_mut().zip(&analysis.cross_attention[r]) {
            *h += a / rows.len() as f64;
        }
    }
    Ok(heat)
}

/// Nearest-neighbour upsample of token heat to pixels, min-max normalized
/// (a constant map becomes all zeros).
pub fn upsample(heat: &[f64], grid: (usize, usize), image_size: (usize, usize)) -> Vec<f64> {
    let (gh, gw) = grid;
    let (h, w) = image_size;
    let mut values = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            values.push(heat[(y * gh / h) * gw + x * gw / w]);
        }
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 0.0 {
        for v in &mut values {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        values.iter_mut().for_each(|v| *v = 0.0);
    }
    values
}

pub fn cross_attention_heatmap(analysis: &Analysis, span: Option<(usize, usize)>) -> Result<Heatmap> {
    let rows = heat_rows(analysis, span)?;
    let heat = token_heat(analysis, &rows)?;
    let (height, width) = analysis.image_size;
    Ok(Heatmap {
        height,
        width,
        values: upsample(&heat, analysis.grid, analysis.image_size),
        span,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationReport {
    pub pixel_accuracy: f64,
    pub miou: f64,
    pub map: f64,
    pub evaluated: usize,
    /// Images whose target mask was empty.
    pub skipped_empty: usize,
}

/// Average precision of `scores` against binary `truth`, with tied scores
/// treated as one threshold.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> f64 {
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return 0.0;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            tp += truth[idx[i]] as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
    }
    ap
}

/// Binarize each heatmap at its own mean, then average pixel accuracy and
/// foreground IoU over images; mAP averages per-image AP of raw scores.
pub fn segmentation_eval(heatmaps: &[Heatmap], masks: &[&[bool]]) -> Result<SegmentationReport> {
    if heatmaps.len() != masks.len() {
        return Err(XbmError::Invalid("one mask per heatmap required".into()));
    }
    let (mut acc, mut iou, mut ap, mut n, mut skipped) = (0.0, 0.0, 0.0, 0usize, 0usize);
    for (h, m) in heatmaps.iter().zip(masks) {
        if h.values.len() != m.len() {
            return Err(XbmError::shape("segmentation-eval", format!("heatmap {} vs mask {}", h.values.len(), m.len())));
        }
        if !m.iter().any(|&b| b) {
            skipped += 1;
            continue;
        }
        let mean = h.values.iter().sum::<f64>() / h.values.len() as f64;
        let pred: Vec<bool> = h.values.iter().map(|&v| v > mean).collect();
        let correct = pred.iter().zip(m.iter()).filter(|(p, t)| p == t).count();
        let inter = pred.iter().zip(m.iter()).filter(|(&p, &t)| p && t).count();
        let union = pred.iter().zip(m.iter()).filter(|(&p, &t)| p || t).count();
        acc += correct as f64 / m.len() as f64;
        iou += inter as f64 / union as f64;
        ap += average_precision(&h.values, m);
        n += 1;
    }
    let d = n.max(1) as f64;
    Ok(SegmentationReport {
        pixel_accuracy: acc / d,
        miou: iou / d,
        map: ap / d,
        evaluated: n,
        skipped_empty: skipped,
    })
}

/// Whether a heatmap is hotter on average inside the mask than outside.
pub fn concentrates_on(heatmap: &Heatmap, mask: &[bool]) -> bool {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &m) in heatmap.values.iter().zip(mask) {
        if m {
            si += v;
            ni += 1;
        } else {
            so += v;
            no += 1;
        }
    }
    ni > 0 && no > 0 && si / ni as f64 > so / no as f64
}

/// Remove tokens `[start, end)` and re-pad.
pub fn delete_span(seq: &TokenSequence, start: usize, end: usize) -> Result<TokenSequence> {
    let content = seq.content();
    let end = end.min(content.len());
    let start = start.min(end);
    let kept: Vec<usize> = content[..start].iter().chain(&content[end..]).copied().collect();
    TokenSequence::from_content(&kept, seq.max_len())
}

#[derive(Clone, Debug, PartialEq)]
pub enum InterventionSpec {
    /// Uniform word tokens, as many as the generated explanation has.
    Randomized { seed: u64 },
    /// The example's ground-truth caption.
    GroundTruth,
    Custom(TokenSequence),
}

impl InterventionSpec {
    pub fn name(&self) -> &'static str {
        match self {
            InterventionSpec::Randomized { .. } => "randomized",
            InterventionSpec::GroundTruth => "ground_truth",
            InterventionSpec::Custom(_) => "custom",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterventionOutcome {
    pub original_class: usize,
    pub original_logits: Vec<f64>,
    pub intervened_class: usize,
    pub intervened_logits: Vec<f64>,
    pub replacement: TokenSequence,
}

/// Replacement explanation for an intervention.
pub fn replacement(spec: &InterventionSpec, example: &Example, generated: &TokenSequence, vocab: &Vocabulary) -> Result<TokenSequence> {
    match spec {
        InterventionSpec::Randomized { seed } => {
            let words = vocab.word_ids();
            let mut rng = Rng::new(*seed).substream(&[example.id]);
            let content: Vec<usize> = (0..generated.content().len())
                .map(|_| words.start + rng.below(words.len()))
                .collect();
            TokenSequence::from_content(&content, generated.max_len())
        }
        InterventionSpec::GroundTruth => example
            .caption
            .clone()
            .ok_or_else(|| XbmError::Data(format!("example {} has no ground-truth caption", example.id))),
        InterventionSpec::Custom(seq) => {
            if seq.max_len() != generated.max_len() {
                return Err(XbmError::Invalid(format!(
                    "replacement length {} differs from L = {}",
                    seq.max_len(),
                    generated.max_len()
                )));
            }
            TokenSequence::from_ids(seq.ids().to_vec(), vocab.len())
        }
    }
}

/// Classify with the generated explanation and with its replacement.
pub fn intervene(bundle: &ModelBundle, example: &Example, generated: &TokenSequence, spec: &InterventionSpec, vocab: &Vocabulary) -> Result<InterventionOutcome> {
    let rep = replacement(spec, example, generated, vocab)?;
    let mut logits = classify_with(bundle, &[&example.image, &example.image], &[generated, &rep])?;
    let intervened_logits = logits.pop().expect("two rows");
    let original_logits = logits.pop().expect("two rows");
    Ok(InterventionOutcome {
        original_class: argmax(&original_logits),
        original_logits,
        intervened_class: argmax(&intervened_logits),
        intervened_logits,
        replacement: rep,
    })
}

/// Accuracy on `examples` with each kind of explanation in place of the
/// generated one; returns `(normal, intervened)`.
pub fn intervention_accuracy(
    bundle: &ModelBundle,
    examples: &[Example],
    generated: &[TokenSequence],
    spec: &InterventionSpec,
    vocab: &Vocabulary,
) -> Result<(f64, f64)> {
    if examples.len() != generated.len() || examples.is_empty() {
        return Err(XbmError::Invalid("one generated explanation per example required".into()));
    }
    let (mut normal, mut inter) = (0usize, 0usize);
    for (e, gen) in examples.iter().zip(generated) {
        let o = intervene(bundle, e, gen, spec, vocab)?;
        normal += (o.original_class == e.label) as usize;
        inter += (o.intervened_class == e.label) as usize;
    }
    let n = examples.len() as f64;
    Ok((normal as f64 / n, inter as f64 / n))
}

/// Three-section explanation report: text, ranked phrases, heatmap file.
pub fn render_report(analysis: &Analysis, phrases: &[ConceptPhrase], vocab: &Vocabulary, class_name: &str, heatmap_file: &str, image_file: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "[explanation]");
    let _ = writeln!(s, "{}", vocab.decode(analysis.explanation.content()));
    let _ = writeln!(s, "prediction = {class_name}");
    let _ = writeln!(s);
    let _ = writeln!(s, "[phrases]");
    let _ = writeln!(s, "# [CLS] self-attention, layer {} of the classifier, heads averaged", analysis.layer + 1);
    for p in phrases {
        let _ = writeln!(s, "{:.2}\t{}", p.score, p.text);
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "[heatmap]");
    let _ = writeln!(s, "heatmap = {heatmap_file}");
    let _ = writeln!(s, "image = {image_file}");
    s
}
