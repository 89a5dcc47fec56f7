//! The three networks: vision encoder, explanation decoder, classifier.
//!
//! Each model owns its [`ParamStore`] so that stores can be frozen, copied
//! (teacher snapshots) and checksummed independently.

pub mod checkpoint;
pub mod layers;
pub mod text;

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Result, XbmError};
use crate::io::KvConfig;
use crate::rng::Rng;
use layers::{Linear, Memory, Stack, StackCache};
use text::{TokenSequence, BOS, CLS};

/// Toy transformer dimensions shared by all networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 32,
            depth: 2,
            heads: 4,
            mlp_hidden: 64,
            patch: 8,
            height: 32,
            width: 32,
            max_len: 36,
            vocab_size: text::Vocabulary::standard().len(),
            num_classes: 8,
        }
    }
}

impl ModelConfig {
    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Pixels per image, `H * W * 3`.
    pub fn image_len(&self) -> usize {
        self.height * self.width * 3
    }

    /// Layer whose attention the interpret module reads: `ceil(depth / 2)`,
    /// one-based, so index `ceil(depth / 2) - 1`.
    pub fn middle_layer(&self) -> usize {
        self.depth.div_ceil(2).max(1) - 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(XbmError::config(k, m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("d_model", "must be a positive multiple of heads");
        }
        if self.depth == 0 {
            return bad("depth", "must be positive");
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad("patch", "must divide the image height and width");
        }
        if self.max_len < 2 {
            return bad("max_len", "must be at least 2");
        }
        if self.vocab_size <= CLS || self.num_classes < 2 {
            return bad("vocab_size", "vocabulary and class count too small");
        }
        Ok(())
    }

    /// Dimension keys with defaults. Image size, length, vocabulary and
    /// class count come from the data, not the config.
    pub fn from_kv(kv: &mut KvConfig, height: usize, width: usize, max_len: usize, vocab_size: usize, num_classes: usize) -> Result<Self> {
        let d = ModelConfig::default();
        let c = ModelConfig {
            d_model: kv.get_or("d_model", d.d_model)?,
            depth: kv.get_or("depth", d.depth)?,
            heads: kv.get_or("heads", d.heads)?,
            mlp_hidden: kv.get_or("mlp_hidden", d.mlp_hidden)?,
            patch: kv.get_or("patch", d.patch)?,
            height,
            width,
            max_len,
            vocab_size,
            num_classes,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn echo(&self) -> String {
        format!(
            "d_model = {}\ndepth = {}\nheads = {}\nmlp_hidden = {}\npatch = {}\nheight = {}\nwidth = {}\nmax_len = {}\nvocab_size = {}\nnum_classes = {}\n",
            self.d_model,
            self.depth,
            self.heads,
            self.mlp_hidden,
            self.patch,
            self.height,
            self.width,
            self.max_len,
            self.vocab_size,
            self.num_classes
        )
    }

    pub fn from_echo(text: &str) -> Result<Self> {
        let mut kv = KvConfig::parse(text)?;
        let c = ModelConfig {
            d_model: kv.require("d_model")?,
            depth: kv.require("depth")?,
            heads: kv.require("heads")?,
            mlp_hidden: kv.require("mlp_hidden")?,
            patch: kv.require("patch")?,
            height: kv.require("height")?,
            width: kv.require("width")?,
            max_len: kv.require("max_len")?,
            vocab_size: kv.require("vocab_size")?,
            num_classes: kv.require("num_classes")?,
        };
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }
}

/// Embedding tables get a larger spread than linear layers so token and
/// position identity survive the first layer norm.
const EMBED_STD: f64 = 0.5;
const POS_STD: f64 = 0.1;

/// Patch-based transformer encoder `h_psi`: image to `T x d` tokens.
#[derive(Clone, Debug)]
pub struct VisionEncoder {
    config: ModelConfig,
    pub store: ParamStore,
    proj: Linear,
    pos: ParamId,
    stack: Stack,
    /// Flat HWC pixel index for each (patch, within-patch) slot.
    patch_index: Vec<usize>,
}

impl VisionEncoder {
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut store = ParamStore::new();
        let proj = Linear::new(&mut store, "patch_proj", c.patch_dim(), c.d_model, rng);
        let pos = store.add_normal("pos", &[c.num_patches(), c.d_model], POS_STD, rng);
        let stack = Stack::new(&mut store, "enc", c.d_model, c.depth, c.heads, c.mlp_hidden, false, false, rng);
        Ok(VisionEncoder {
            config: c.clone(),
            store,
            proj,
            pos,
            stack,
            patch_index: patch_index(c),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Encode a batch of HWC images into `[B, T, d]`.
    pub fn encode(&self, g: &mut Graph, images: &[&[f64]]) -> Result<Var> {
        let n = self.config.image_len();
        if images.is_empty() {
            return Err(XbmError::shape("encode", "empty image batch".to_string()));
        }
        let mut patches = Vec::with_capacity(images.len() * n);
        for img in images {
            if img.len() != n {
                return Err(XbmError::shape(
                    "encode",
                    format!("image of {} values, expected {}x{}x3", img.len(), self.config.height, self.config.width),
                ));
            }
            patches.extend(self.patch_index.iter().map(|&i| img[i]));
        }
        let t = Tensor::new(
            vec![images.len(), self.config.num_patches(), self.config.patch_dim()],
            patches,
        )?;
        let x = g.constant(t)?;
        self.encode_patches(g, x)
    }

    /// Encode differentiable pixels `[B, H*W*3]`; used to probe pixel gradients.
    pub fn encode_pixels(&self, g: &mut Graph, pixels: Var) -> Result<Var> {
        let s = g.shape(pixels).to_vec();
        if s.len() != 2 || s[1] != self.config.image_len() {
            return Err(XbmError::shape("encode", format!("pixels {s:?}")));
        }
        let (b, n) = (s[0], s[1]);
        let flat = g.reshape(pixels, &[b * n, 1])?;
        let rows: Vec<usize> = (0..b)
            .flat_map(|i| self.patch_index.iter().map(move |&p| i * n + p))
            .collect();
        let picked = g.select_rows(flat, &rows)?;
        let x = g.reshape(picked, &[b, self.config.num_patches(), self.config.patch_dim()])?;
        self.encode_patches(g, x)
    }

    fn encode_patches(&self, g: &mut Graph, patches: Var) -> Result<Var> {
        let x = self.proj.forward(g, &self.store, patches)?;
        let pos = g.param(&self.store, self.pos)?;
        let x = g.add(x, pos)?;
        Ok(self.stack.forward(g, &self.store, x, None)?.out)
    }
}

fn patch_index(c: &ModelConfig) -> Vec<usize> {
    let (p, gw) = (c.patch, c.width / c.patch);
    let mut idx = Vec::with_capacity(c.image_len());
    for t in 0..c.num_patches() {
        let (pr, pc) = (t / gw, t % gw);
        for dy in 0..p {
            for dx in 0..p {
                let (y, x) = (pr * p + dy, pc * p + dx);
                for ch in 0..3 {
                    idx.push((y * c.width + x) * 3 + ch);
                }
            }
        }
    }
    idx
}

fn check_ids(ids: &[Vec<usize>], vocab: usize, op: &'static str) -> Result<usize> {
    let n = ids.first().map_or(0, Vec::len);
    if n == 0 || ids.iter().any(|r| r.len() != n) {
        return Err(XbmError::shape(op, "token rows must be nonempty and equal length".to_string()));
    }
    if let Some(&bad) = ids.iter().flatten().find(|&&t| t >= vocab) {
        return Err(XbmError::Data(format!("unknown token id {bad}")));
    }
    Ok(n)
}

/// Autoregressive decoder `g_phi` with causal self-attention and
/// cross-attention onto image tokens.
#[derive(Clone, Debug)]
pub struct ExplanationDecoder {
    config: ModelConfig,
    pub store: ParamStore,
    tok: ParamId,
    pos: ParamId,
    stack: Stack,
    head: Linear,
}

/// Incremental decoding state: cached keys/values and the next position.
#[derive(Clone, Debug)]
pub struct DecoderState {
    cache: StackCache,
    pos: usize,
}

impl DecoderState {
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Keep batch rows `rows` (in that order) of the cache.
    pub fn select(&mut self, g: &mut Graph, rows: &[usize]) -> Result<()> {
        self.cache.select(g, rows)
    }
}

impl ExplanationDecoder {
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut store = ParamStore::new();
        let tok = store.add_normal("tok", &[c.vocab_size, c.d_model], EMBED_STD, rng);
        let pos = store.add_normal("pos", &[c.max_len, c.d_model], POS_STD, rng);
        let stack = Stack::new(&mut store, "dec", c.d_model, c.depth, c.heads, c.mlp_hidden, true, true, rng);
        let head = Linear::new(&mut store, "head", c.d_model, c.vocab_size, rng);
        Ok(ExplanationDecoder {
            config: c.clone(),
            store,
            tok,
            pos,
            stack,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Cross-attention keys/values for image tokens `[B, T, d]`.
    pub fn memory(&self, g: &mut Graph, image_tokens: Var) -> Result<Memory> {
        self.stack.memory(g, &self.store, image_tokens)
    }

    /// Hard ids `[B][n]` to embeddings `[B, n, d]`.
    pub fn embed_hard(&self, g: &mut Graph, ids: &[Vec<usize>]) -> Result<Var> {
        let n = check_ids(ids, self.config.vocab_size, "decoder-embed")?;
        let table = g.param(&self.store, self.tok)?;
        let flat: Vec<usize> = ids.iter().flatten().copied().collect();
        let e = g.gather(table, &flat)?;
        g.reshape(e, &[ids.len(), n, self.config.d_model])
    }

    /// Distributions `[B, n, V]` to embedding mixtures `[B, n, d]`.
    pub fn embed_soft(&self, g: &mut Graph, probs: Var) -> Result<Var> {
        let table = g.param(&self.store, self.tok)?;
        g.matmul(probs, table)
    }

    /// Teacher-forced pass: input embeddings `[B, n, d]` for positions
    /// `0..n` (BOS first) give next-token logits `[B, n, V]`.
    pub fn forward(&self, g: &mut Graph, memory: &Memory, inputs: Var) -> Result<Var> {
        let n = g.shape(inputs)[1];
        if n > self.config.max_len {
            return Err(XbmError::shape(
                "decoder",
                format!("prefix of {n} positions exceeds max_len {}", self.config.max_len),
            ));
        }
        let pos = g.param(&self.store, self.pos)?;
        let pos = g.slice(pos, 0, 0, n)?;
        let x = g.add(inputs, pos)?;
        let h = self.stack.forward(g, &self.store, x, Some(memory))?.out;
        self.head.forward(g, &self.store, h)
    }

    /// Teacher-forced logits for hard targets: inputs are BOS followed by
    /// all but the last target token.
    pub fn forward_targets(&self, g: &mut Graph, memory: &Memory, targets: &[&TokenSequence]) -> Result<Var> {
        let inputs: Vec<Vec<usize>> = targets
            .iter()
            .map(|t| {
                let ids = t.ids();
                std::iter::once(BOS).chain(ids[..ids.len() - 1].iter().copied()).collect()
            })
            .collect();
        let x = self.embed_hard(g, &inputs)?;
        self.forward(g, memory, x)
    }

    pub fn start(&self) -> DecoderState {
        DecoderState {
            cache: StackCache::default(),
            pos: 0,
        }
    }

    /// One incremental position: input embedding `[B, 1, d]` to logits `[B, 1, V]`.
    pub fn step(&self, g: &mut Graph, memory: &Memory, state: &mut DecoderState, input: Var) -> Result<Var> {
        if state.pos >= self.config.max_len {
            return Err(XbmError::shape(
                "decoder",
                format!("prefix reached max_len {}", self.config.max_len),
            ));
        }
        let pos = g.param(&self.store, self.pos)?;
        let pos = g.slice(pos, 0, state.pos, 1)?;
        let x = g.add(input, pos)?;
        let h = self.stack.step(g, &self.store, x, &mut state.cache, Some(memory))?;
        state.pos += 1;
        self.head.forward(g, &self.store, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassifierMode {
    /// Reads only the explanation.
    Text,
    /// Also cross-attends to the image tokens.
    Multimodal,
}

impl fmt::Display for ClassifierMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierMode::Text => "text",
            ClassifierMode::Multimodal => "multimodal",
        })
    }
}

impl FromStr for ClassifierMode {
    type Err = XbmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ClassifierMode::Text),
            "multimodal" => Ok(ClassifierMode::Multimodal),
            _ => Err(XbmError::config("classifier_mode", format!("unknown mode `{s}`"))),
        }
    }
}

/// Explanation fed to the classifier.
#[derive(Clone, Copy, Debug)]
pub enum Explanation<'a> {
    Hard(&'a [Vec<usize>]),
    /// Distributions `[B, L, V]`.
    Soft(Var),
}

#[derive(Clone, Debug)]
pub struct ClassifierOutput {
    /// `[B, K]`.
    pub logits: Var,
    /// Per layer, attention over `[CLS] + explanation` positions.
    pub self_attention: Vec<Var>,
    /// Per layer onto image tokens; empty in text mode.
    pub cross_attention: Vec<Var>,
}

/// Transformer classifier `f_theta` over `[CLS] + explanation`.
#[derive(Clone, Debug)]
pub struct Classifier {
    config: ModelConfig,
    mode: ClassifierMode,
    pub store: ParamStore,
    tok: ParamId,
    pos: ParamId,
    stack: Stack,
    head: Linear,
}

impl Classifier {
    pub fn new(config: &ModelConfig, mode: ClassifierMode, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut store = ParamStore::new();
        let tok = store.add_normal("tok", &[c.vocab_size, c.d_model], EMBED_STD, rng);
        let pos = store.add_normal("pos", &[c.max_len + 1, c.d_model], POS_STD, rng);
        let cross = mode == ClassifierMode::Multimodal;
        let stack = Stack::new(&mut store, "cls", c.d_model, c.depth, c.heads, c.mlp_hidden, false, cross, rng);
        let head = Linear::new(&mut store, "head", c.d_model, c.num_classes, rng);
        Ok(Classifier {
            config: c.clone(),
            mode,
            store,
            tok,
            pos,
            stack,
            head,
        })
    }

    pub fn mode(&self) -> ClassifierMode {
        self.mode
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Classify a batch. `image_tokens` is ignored in text mode.
    pub fn forward(&self, g: &mut Graph, image_tokens: Option<Var>, explanation: Explanation<'_>) -> Result<ClassifierOutput> {
        let table = g.param(&self.store, self.tok)?;
        let d = self.config.d_model;
        let (b, tokens) = match explanation {
            Explanation::Hard(ids) => {
                let n = check_ids(ids, self.config.vocab_size, "classifier-embed")?;
                let flat: Vec<usize> = ids.iter().flat_map(|r| std::iter::once(CLS).chain(r.iter().copied())).collect();
                let e = g.gather(table, &flat)?;
                (ids.len(), g.reshape(e, &[ids.len(), n + 1, d])?)
            }
            Explanation::Soft(probs) => {
                let s = g.shape(probs).to_vec();
                if s.len() != 3 || s[2] != self.config.vocab_size {
                    return Err(XbmError::shape("classifier-embed", format!("soft tokens {s:?}")));
                }
                let e = g.matmul(probs, table)?;
                let cls = g.gather(table, &vec![CLS; s[0]])?;
                let cls = g.reshape(cls, &[s[0], 1, d])?;
                (s[0], g.concat(&[cls, e], 1)?)
            }
        };
        let n = g.shape(tokens)[1];
        if n > self.config.max_len + 1 {
            return Err(XbmError::shape(
                "classifier",
                format!("explanation of {} tokens exceeds max_len {}", n - 1, self.config.max_len),
            ));
        }
        let pos = g.param(&self.store, self.pos)?;
        let pos = g.slice(pos, 0, 0, n)?;
        let x = g.add(tokens, pos)?;
        let memory = match (self.mode, image_tokens) {
            (ClassifierMode::Text, _) => None,
            (ClassifierMode::Multimodal, Some(img)) => {
                if g.shape(img)[0] != b {
                    return Err(XbmError::shape("classifier", "image and explanation batch sizes differ".to_string()));
                }
                Some(self.stack.memory(g, &self.store, img)?)
            }
            (ClassifierMode::Multimodal, None) => {
                return Err(XbmError::Invalid("multimodal classifier needs image tokens".into()))
            }
        };
        let out = self.stack.forward(g, &self.store, x, memory.as_ref())?;
        let cls_rows = g.slice(out.out, 1, 0, 1)?;
        let cls_rows = g.reshape(cls_rows, &[b, d])?;
        let logits = self.head.forward(g, &self.store, cls_rows)?;
        Ok(ClassifierOutput {
            logits,
            self_attention: out.self_attention,
            cross_attention: out.cross_attention,
        })
    }
}

/// Student and teacher models of one XBM run.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub encoder: VisionEncoder,
    pub decoder: ExplanationDecoder,
    pub classifier: Classifier,
    pub teacher_encoder: VisionEncoder,
    pub teacher_decoder: ExplanationDecoder,
}

impl ModelBundle {
    /// Student initialized from the pretrained pair; the teacher is a
    /// frozen copy of the same pair.
    pub fn from_pretrained(encoder: &VisionEncoder, decoder: &ExplanationDecoder, mode: ClassifierMode, rng: &mut Rng) -> Result<Self> {
        let config = encoder.config().clone();
        let mut teacher_encoder = encoder.clone();
        let mut teacher_decoder = decoder.clone();
        teacher_encoder.store.set_frozen(true);
        teacher_decoder.store.set_frozen(true);
        let mut student_encoder = encoder.clone();
        let mut student_decoder = decoder.clone();
        student_encoder.store.set_frozen(false);
        student_decoder.store.set_frozen(false);
        Ok(ModelBundle {
            classifier: Classifier::new(&config, mode, rng)?,
            config,
            encoder: student_encoder,
            decoder: student_decoder,
            teacher_encoder,
            teacher_decoder,
        })
    }

    /// All five parameter trees. The config echo carries the classifier
    /// mode as a trailing `classifier_mode` line.
    pub fn to_checkpoint(&self) -> checkpoint::Checkpoint {
        let echo = format!("{}classifier_mode = {}\n", self.config.echo(), self.classifier.mode());
        let mut c = checkpoint::Checkpoint::new(echo);
        c.add_tree("encoder", &self.encoder.store);
        c.add_tree("decoder", &self.decoder.store);
        c.add_tree("classifier", &self.classifier.store);
        c.add_tree("teacher_encoder", &self.teacher_encoder.store);
        c.add_tree("teacher_decoder", &self.teacher_decoder.store);
        c
    }

    pub fn from_checkpoint(ckpt: &checkpoint::Checkpoint) -> Result<Self> {
        let (model_echo, mode) = match ckpt.config_echo.rsplit_once("classifier_mode = ") {
            Some((m, mode)) => (m, mode.trim().parse::<ClassifierMode>()?),
            None => return Err(XbmError::Data("bundle checkpoint lacks classifier_mode".into())),
        };
        let config = ModelConfig::from_echo(model_echo)?;
        let mut rng = Rng::new(0);
        let enc = VisionEncoder::new(&config, &mut rng)?;
        let dec = ExplanationDecoder::new(&config, &mut rng)?;
        let mut b = ModelBundle::from_pretrained(&enc, &dec, mode, &mut rng)?;
        ckpt.load_into("encoder", &mut b.encoder.store)?;
        ckpt.load_into("decoder", &mut b.decoder.store)?;
        ckpt.load_into("classifier", &mut b.classifier.store)?;
        ckpt.load_into("teacher_encoder", &mut b.teacher_encoder.store)?;
        ckpt.load_into("teacher_decoder", &mut b.teacher_decoder.store)?;
        Ok(b)
    }

    /// Scalars in the trainable student (encoder, decoder, classifier).
    pub fn num_student_parameters(&self) -> usize {
        self.encoder.store.num_scalars() + self.decoder.store.num_scalars() + self.classifier.store.num_scalars()
    }
}
