//! Sequence generation: beam search for references and inference,
//! Gumbel-softmax relaxed sampling with an annealed temperature for training.

use std::cmp::Ordering;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Result, XbmError};
use crate::nn::layers::Memory;
use crate::nn::text::{TokenSequence, BOS, CLS, EOS, PAD};
use crate::nn::{DecoderState, ExplanationDecoder, VisionEncoder};
use crate::rng::Rng;

/// Exponentially annealed Gumbel-softmax temperature,
/// `tau(i) = max(tau_min, tau0 * exp(-rate * i))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GumbelSchedule {
    pub tau0: f64,
    pub rate: f64,
    pub tau_min: f64,
}

impl Default for GumbelSchedule {
    fn default() -> Self {
        GumbelSchedule {
            tau0: 10.0,
            rate: 1e-4,
            tau_min: 0.1,
        }
    }
}

impl GumbelSchedule {
    /// A schedule that stays at `tau0`.
    pub fn constant(tau0: f64) -> Self {
        GumbelSchedule {
            tau0,
            rate: 0.0,
            tau_min: tau0.min(0.1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0 && self.tau_min > 0.0 && self.rate >= 0.0) {
            return Err(XbmError::config("tau0", "temperatures must be positive and the rate nonnegative"));
        }
        Ok(())
    }

    pub fn tau(&self, step: u64) -> f64 {
        anneal(self, step)
    }
}

pub fn anneal(schedule: &GumbelSchedule, step: u64) -> f64 {
    (schedule.tau0 * (-schedule.rate * step as f64).exp()).max(schedule.tau_min)
}

/// Next-token scorer that can be advanced one position at a time over a
/// batch of hypotheses.
pub trait StepModel {
    type State;
    fn vocab_size(&self) -> usize;
    /// State for a single empty hypothesis.
    fn start(&self) -> Result<Self::State>;
    /// Feed one token per row; returns next-token log-probabilities per row.
    fn advance(&self, state: &mut Self::State, tokens: &[usize]) -> Result<Vec<Vec<f64>>>;
    /// Keep rows `rows` (with repetition) in that order.
    fn reorder(&self, state: &mut Self::State, rows: &[usize]) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub width: usize,
    /// Generated positions, EOS included.
    pub max_len: usize,
    /// Without an EOS every hypothesis runs exactly `max_len` steps.
    pub eos: Option<usize>,
    /// Tokens that may never be generated.
    pub banned: Vec<usize>,
    /// First input token.
    pub start_token: usize,
}

impl BeamConfig {
    /// Settings for the explanation decoder: stop at EOS, never emit
    /// BOS, PAD or CLS.
    pub fn explanation(width: usize, max_len: usize) -> Self {
        BeamConfig {
            width,
            max_len,
            eos: Some(EOS),
            banned: vec![PAD, BOS, CLS],
            start_token: BOS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Generated tokens, including the final EOS when one was emitted.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
    /// Step at which the hypothesis ended.
    pub finish_step: usize,
}

impl BeamHypothesis {
    /// Log-probability per generated token.
    pub fn score(&self) -> f64 {
        self.log_prob / self.tokens.len().max(1) as f64
    }

    /// Tokens before EOS.
    pub fn content(&self, eos: usize) -> &[usize] {
        let end = self.tokens.iter().position(|&t| t == eos).unwrap_or(self.tokens.len());
        &self.tokens[..end]
    }
}

/// Total order for final selection: higher normalized score, then lower
/// token ids, then earlier finishing step.
fn better(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then_with(|| a.tokens.cmp(&b.tokens))
        .then_with(|| a.finish_step.cmp(&b.finish_step))
}

/// Beam search returning the finished hypothesis with the best
/// length-normalized log-probability.
///
/// A single pruned beam is not monotone in its width, so the result is the
/// best over beams of every width `1..=width`. When `width` reaches the
/// number of possible paths one exhaustive beam is run instead. Width 1 is
/// greedy decoding.
pub fn beam_search<M: StepModel>(model: &M, config: &BeamConfig) -> Result<BeamHypothesis> {
    if config.width == 0 || config.max_len == 0 {
        return Err(XbmError::Invalid("beam width and max_len must be positive".into()));
    }
    let allowed = model.vocab_size() - config.banned.iter().filter(|&&t| t < model.vocab_size()).count();
    let paths = (allowed as f64).powi(config.max_len as i32);
    if (config.width as f64) >= paths {
        return single_beam(model, config, config.width);
    }
    let mut best: Option<BeamHypothesis> = None;
    for w in 1..=config.width {
        let h = single_beam(model, config, w)?;
        if best.as_ref().is_none_or(|b| better(&h, b) == Ordering::Less) {
            best = Some(h);
        }
    }
    Ok(best.expect("width >= 1"))
}

pub fn greedy<M: StepModel>(model: &M, config: &BeamConfig) -> Result<BeamHypothesis> {
    single_beam(model, config, 1)
}

struct Live {
    tokens: Vec<usize>,
    log_prob: f64,
}

fn single_beam<M: StepModel>(model: &M, config: &BeamConfig, width: usize) -> Result<BeamHypothesis> {
    let v = model.vocab_size();
    let mut state = model.start()?;
    let mut live = vec![Live {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    let mut inputs = vec![config.start_token];
    for step in 0..config.max_len {
        let lps = model.advance(&mut state, &inputs)?;
        let last = step + 1 == config.max_len;
        // (log_prob, parent, token)
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * v);
        for (i, h) in live.iter().enumerate() {
            for t in 0..v {
                if config.banned.contains(&t) {
                    continue;
                }
                if last && config.eos.is_some_and(|e| e != t) {
                    continue;
                }
                cands.push((h.log_prob + lps[i][t], i, t));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.1.cmp(&b.1)));
        cands.truncate(width);
        let mut next = Vec::new();
        let mut parents = Vec::new();
        for (lp, parent, t) in cands {
            let mut tokens = live[parent].tokens.clone();
            tokens.push(t);
            if config.eos == Some(t) || (config.eos.is_none() && last) {
                finished.push(BeamHypothesis {
                    tokens,
                    log_prob: lp,
                    finished: true,
                    finish_step: step,
                });
            } else {
                next.push(Live { tokens, log_prob: lp });
                parents.push(parent);
            }
        }
        if next.is_empty() {
            break;
        }
        model.reorder(&mut state, &parents)?;
        inputs = next.iter().map(|h| *h.tokens.last().expect("nonempty")).collect();
        live = next;
    }
    finished.sort_by(better);
    finished
        .into_iter()
        .next()
        .ok_or_else(|| XbmError::Invalid("beam search finished no hypothesis".into()))
}

/// Incremental scorer over the explanation decoder for one image.
pub struct DecoderScorer<'a> {
    decoder: &'a ExplanationDecoder,
    /// Image tokens `[1, T, d]`.
    image_tokens: Tensor,
}

pub struct DecoderScorerState {
    graph: Graph,
    memory: Memory,
    state: DecoderState,
}

impl<'a> DecoderScorer<'a> {
    pub fn new(decoder: &'a ExplanationDecoder, image_tokens: Tensor) -> Self {
        DecoderScorer { decoder, image_tokens }
    }
}

impl StepModel for DecoderScorer<'_> {
    type State = DecoderScorerState;

    fn vocab_size(&self) -> usize {
        self.decoder.config().vocab_size
    }

    fn start(&self) -> Result<DecoderScorerState> {
        let mut graph = Graph::new();
        let img = graph.constant(self.image_tokens.clone())?;
        let memory = self.decoder.memory(&mut graph, img)?;
        Ok(DecoderScorerState {
            graph,
            memory,
            state: self.decoder.start(),
        })
    }

    fn advance(&self, s: &mut DecoderScorerState, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<Vec<usize>> = tokens.iter().map(|&t| vec![t]).collect();
        let x = self.decoder.embed_hard(&mut s.graph, &rows)?;
        let logits = self.decoder.step(&mut s.graph, &s.memory, &mut s.state, x)?;
        let lp = s.graph.log_softmax(logits)?;
        let t = s.graph.value(lp);
        Ok((0..tokens.len()).map(|r| t.row(r).to_vec()).collect())
    }

    fn reorder(&self, s: &mut DecoderScorerState, rows: &[usize]) -> Result<()> {
        s.memory = s.memory.select(&mut s.graph, rows)?;
        s.state.select(&mut s.graph, rows)
    }
}

/// Encode one image and return its tokens `[1, T, d]` as a plain tensor.
pub fn image_tokens(encoder: &VisionEncoder, image: &[f64]) -> Result<Tensor> {
    let mut g = Graph::new();
    let h = encoder.encode(&mut g, &[image])?;
    Ok(g.value(h).clone())
}

/// Beam-search explanation for one image.
pub fn explain(encoder: &VisionEncoder, decoder: &ExplanationDecoder, image: &[f64], width: usize) -> Result<TokenSequence> {
    let tokens = image_tokens(encoder, image)?;
    let max_len = decoder.config().max_len;
    let h = beam_search(&DecoderScorer::new(decoder, tokens), &BeamConfig::explanation(width, max_len))?;
    TokenSequence::from_content(h.content(EOS), max_len)
}

/// Noise added to log-probabilities before the tempered softmax.
#[derive(Clone, Debug)]
pub enum GumbelNoise {
    /// No noise: the sample is the tempered model distribution.
    Zero,
    /// Standard Gumbel draws from `Rng::new(seed).substream([id, position])`
    /// for each example id.
    Seeded { seed: u64, ids: Vec<u64> },
}

impl GumbelNoise {
    /// Noise tensor `[B, 1, V]` for one position.
    pub fn at(&self, batch: usize, position: usize, vocab: usize) -> Result<Tensor> {
        match self {
            GumbelNoise::Zero => Ok(Tensor::zeros(&[batch, 1, vocab])),
            GumbelNoise::Seeded { seed, ids } => {
                if ids.len() != batch {
                    return Err(XbmError::Invalid(format!("{} noise ids for batch of {batch}", ids.len())));
                }
                let root = Rng::new(*seed);
                let mut data = Vec::with_capacity(batch * vocab);
                for &id in ids {
                    let mut r = root.substream(&[id, position as u64]);
                    data.extend((0..vocab).map(|_| r.gumbel()));
                }
                Tensor::new(vec![batch, 1, vocab], data)
            }
        }
    }
}

/// `softmax((log_probs + noise) / tau)` over the last axis, on the graph.
pub fn relaxed_sample(g: &mut Graph, log_probs: Var, noise: Tensor, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(XbmError::Invalid(format!("Gumbel-softmax temperature must be positive, got {tau}")));
    }
    let n = g.constant(noise)?;
    let z = g.add(log_probs, n)?;
    let z = g.scale(z, 1.0 / tau)?;
    g.softmax(z)
}

/// Plain Gumbel-softmax draw for a single logit vector.
pub fn gumbel_softmax(logits: &[f64], tau: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(XbmError::Invalid(format!("Gumbel-softmax temperature must be positive, got {tau}")));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let z: Vec<f64> = logits.iter().map(|l| (l - lse + rng.gumbel()) / tau).collect();
    let zm = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - zm).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / s).collect())
}

/// Free-running relaxed decoding: at each of the decoder's `max_len`
/// positions the relaxed sample is fed back as an embedding mixture.
/// Returns soft tokens `[B, L, V]`, differentiable with respect to the
/// decoder and (through `memory`) the encoder.
pub fn gumbel_softmax_sample(
    g: &mut Graph,
    decoder: &ExplanationDecoder,
    memory: &Memory,
    batch: usize,
    tau: f64,
    noise: &GumbelNoise,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(XbmError::Invalid(format!("Gumbel-softmax temperature must be positive, got {tau}")));
    }
    let c = decoder.config();
    let mut state = decoder.start();
    let mut input = decoder.embed_hard(g, &vec![vec![BOS]; batch])?;
    let mut rows = Vec::with_capacity(c.max_len);
    for pos in 0..c.max_len {
        let logits = decoder.step(g, memory, &mut state, input)?;
        let lp = g.log_softmax(logits)?;
        let y = relaxed_sample(g, lp, noise.at(batch, pos, c.vocab_size)?, tau)?;
        rows.push(y);
        if pos + 1 < c.max_len {
            input = decoder.embed_soft(g, y)?;
        }
    }
    g.concat(&rows, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed table of log-probabilities indexed by (prefix length, last token).
    struct Table {
        v: usize,
        lp: Vec<Vec<f64>>,
    }

    impl StepModel for Table {
        type State = Vec<Vec<usize>>;
        fn vocab_size(&self) -> usize {
            self.v
        }
        fn start(&self) -> Result<Self::State> {
            Ok(vec![vec![]])
        }
        fn advance(&self, s: &mut Self::State, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
            for (row, &t) in s.iter_mut().zip(tokens) {
                row.push(t);
            }
            Ok(s.iter().map(|r| self.lp[(r.len() - 1) * self.v + r.last().unwrap()].clone()).collect())
        }
        fn reorder(&self, s: &mut Self::State, rows: &[usize]) -> Result<()> {
            *s = rows.iter().map(|&r| s[r].clone()).collect();
            Ok(())
        }
    }

    fn normalize(v: Vec<f64>) -> Vec<f64> {
        let lse = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        v.into_iter().map(|x| x - lse).collect()
    }

    #[test]
    fn anneal_closed_form() {
        let s = GumbelSchedule::default();
        assert_eq!(s.tau(0), 10.0);
        assert!((s.tau(10_000) - 10.0 * (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(s.tau(10_000_000), 0.1);
    }

    #[test]
    fn width_one_is_greedy_and_eos_stops() {
        // token 2 is EOS; first step prefers 1, then EOS.
        let v = 3;
        let mut lp = Vec::new();
        for _step in 0..3 {
            for _last in 0..v {
                lp.push(normalize(vec![0.0, 1.0, 0.5]));
            }
        }
        lp[v + 1] = normalize(vec![0.0, 0.0, 3.0]);
        let t = Table { v, lp };
        let cfg = BeamConfig {
            width: 1,
            max_len: 3,
            eos: Some(2),
            banned: vec![],
            start_token: 0,
        };
        let g = greedy(&t, &cfg).unwrap();
        assert_eq!(g, beam_search(&t, &cfg).unwrap());
        assert_eq!(g.tokens, vec![1, 2]);
        assert_eq!(g.finish_step, 1);
    }

    #[test]
    fn unfinished_beams_are_forced_to_eos() {
        let v = 3;
        let lp = vec![normalize(vec![0.0, 5.0, -5.0]); 3 * v];
        let t = Table { v, lp };
        let cfg = BeamConfig {
            width: 2,
            max_len: 3,
            eos: Some(2),
            banned: vec![],
            start_token: 0,
        };
        let h = beam_search(&t, &cfg).unwrap();
        assert_eq!(h.tokens.last(), Some(&2));
        assert_eq!(h.tokens.len(), 3);
    }

    #[test]
    fn zero_temperature_is_rejected() {
        assert!(gumbel_softmax(&[1.0, 2.0], 0.0, &mut Rng::new(0)).is_err());
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert!(relaxed_sample(&mut g, x, Tensor::vector(vec![0.0, 0.0]), -1.0).is_err());
    }
}
