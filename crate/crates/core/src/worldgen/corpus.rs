use std::fmt;
use std::str::FromStr;

use super::{caption, render, sample_scene, Scene, SceneSpec};
use crate::error::{Result, XbmError};
use crate::nn::text::{TokenSequence, Vocabulary};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Pretrain,
    Train,
    Val,
    Test,
    Intervention,
}

impl Split {
    pub const ALL: [Split; 5] = [
        Split::Pretrain,
        Split::Train,
        Split::Val,
        Split::Test,
        Split::Intervention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Intervention => "intervention",
        }
    }

    /// Whether examples of this split carry ground-truth captions.
    pub fn has_captions(self) -> bool {
        matches!(self, Split::Pretrain | Split::Intervention)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = XbmError;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| XbmError::Data(format!("unknown split `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Index within the corpus seed space; unique across splits.
    pub id: u64,
    pub scene: Scene,
    /// `H x W x 3`, values in `[0, 1]`.
    pub image: Vec<f64>,
    pub label: usize,
    pub caption: Option<TokenSequence>,
    /// One mask per object, in `scene.objects` order.
    pub masks: Vec<Vec<bool>>,
}

impl Example {
    pub fn generate(id: u64, corpus_seed: u64, spec: &SceneSpec, vocab: &Vocabulary, with_caption: Option<u64>) -> Result<Self> {
        let root = Rng::new(corpus_seed).substream(&[id]);
        let scene_seed = root.substream(&[0]).next_u64();
        let scene = sample_scene(scene_seed, spec);
        let rendering = render(&scene, spec);
        let label = scene.label(spec)?;
        let caption = match with_caption {
            Some(style) => Some(caption(&scene, spec, vocab, style)?),
            None => None,
        };
        Ok(Example {
            id,
            scene,
            image: rendering.image,
            label,
            caption,
            masks: rendering.masks,
        })
    }

    pub fn target_mask(&self) -> &[bool] {
        &self.masks[self.scene.target]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    /// Sizes in [`Split::ALL`] order.
    pub sizes: [usize; 5],
    /// First example id of each split. Ranges must not overlap.
    pub seed_starts: [u64; 5],
}

impl CorpusConfig {
    pub fn new(seed: u64, sizes: [usize; 5]) -> Self {
        CorpusConfig {
            seed,
            sizes,
            seed_starts: [0, 1 << 32, 2 << 32, 3 << 32, 4 << 32],
        }
    }

    pub fn size(&self, split: Split) -> usize {
        self.sizes[split as usize]
    }

    pub fn check_ranges(&self) -> Result<()> {
        for (i, &n) in self.sizes.iter().enumerate() {
            if n == 0 {
                return Err(XbmError::config(
                    format!("{}_size", Split::ALL[i].name()),
                    "split sizes must be positive",
                ));
            }
        }
        for i in 0..5 {
            for j in i + 1..5 {
                let (a0, a1) = (self.seed_starts[i], self.seed_starts[i] + self.sizes[i] as u64);
                let (b0, b1) = (self.seed_starts[j], self.seed_starts[j] + self.sizes[j] as u64);
                if a0 < b1 && b0 < a1 {
                    return Err(XbmError::Data(format!(
                        "seed ranges of {} and {} overlap",
                        Split::ALL[i],
                        Split::ALL[j]
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpora {
    pub pretrain: Vec<Example>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub intervention: Vec<Example>,
}

impl Corpora {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Pretrain => &self.pretrain,
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
            Split::Intervention => &self.intervention,
        }
    }
}

/// Generate one split. Pretrain captions use a per-example random style;
/// intervention captions use reading order.
pub fn generate_split(split: Split, spec: &SceneSpec, config: &CorpusConfig, vocab: &Vocabulary) -> Result<Vec<Example>> {
    let start = config.seed_starts[split as usize];
    (0..config.size(split) as u64)
        .map(|i| {
            let id = start + i;
            let style = match split {
                Split::Pretrain => Some(Rng::new(config.seed).substream(&[id, 1]).next_u64()),
                Split::Intervention => Some(0),
                _ => None,
            };
            Example::generate(id, config.seed, spec, vocab, style)
        })
        .collect()
}

pub fn build_corpora(spec: &SceneSpec, config: &CorpusConfig, vocab: &Vocabulary) -> Result<Corpora> {
    spec.validate()?;
    config.check_ranges()?;
    Ok(Corpora {
        pretrain: generate_split(Split::Pretrain, spec, config, vocab)?,
        train: generate_split(Split::Train, spec, config, vocab)?,
        val: generate_split(Split::Val, spec, config, vocab)?,
        test: generate_split(Split::Test, spec, config, vocab)?,
        intervention: generate_split(Split::Intervention, spec, config, vocab)?,
    })
}
