use crate::autodiff::Tensor;
use crate::error::{Result, XbmError};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const CLS: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<cls>"];

/// Word lexicon of the caption grammar, in id order after the specials.
pub(crate) const WORDS: [&str; 24] = [
    "a", "the", "in", ",", "small", "large", "red", "green", "blue", "yellow", "purple", "orange",
    "circle", "square", "triangle", "cross", "diamond", "ring", "top", "middle", "bottom", "left",
    "center", "right",
];

/// Token vocabulary: dense ids, specials first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    /// The fixed vocabulary shared by every model and corpus.
    pub fn standard() -> Self {
        let tokens = SPECIALS
            .iter()
            .chain(WORDS.iter())
            .map(|s| s.to_string())
            .collect();
        Vocabulary { tokens }
    }

    /// Parse a sidecar listing (one token per line, id = line number).
    pub fn from_lines(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS.map(String::from) {
            return Err(XbmError::Data("vocabulary must start with the four specials".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !tokens.iter().all(|t| seen.insert(t.as_str())) {
            return Err(XbmError::Data("duplicate vocabulary token".into()));
        }
        Ok(Vocabulary { tokens })
    }

    pub fn to_lines(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// Ids of all non-special tokens.
    pub fn word_ids(&self) -> std::ops::Range<usize> {
        SPECIALS.len()..self.tokens.len()
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<usize>> {
        words
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| XbmError::Data(format!("unknown token `{w}`")))
            })
            .collect()
    }

    /// Space-joined words before EOS; PAD and other specials are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| !Self::is_special(id))
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Hard token sequence of fixed length `L`: content, one EOS, then PAD.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    /// Wrap content tokens (no specials) with EOS and PAD to length `max_len`.
    pub fn from_content(content: &[usize], max_len: usize) -> Result<Self> {
        if content.len() + 1 > max_len {
            return Err(XbmError::Data(format!(
                "sequence of {} tokens plus EOS exceeds length {max_len}",
                content.len()
            )));
        }
        if content.iter().any(|&t| t == EOS || t == PAD) {
            return Err(XbmError::Data("content may not contain EOS or PAD".into()));
        }
        let mut ids = content.to_vec();
        ids.push(EOS);
        ids.resize(max_len, PAD);
        Ok(TokenSequence { ids })
    }

    /// Validate a full padded id list.
    pub fn from_ids(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&t| t >= vocab_size) {
            return Err(XbmError::Data(format!("token id {bad} outside vocabulary")));
        }
        let eos = ids
            .iter()
            .position(|&t| t == EOS)
            .ok_or_else(|| XbmError::Data("sequence has no EOS".into()))?;
        if ids[eos + 1..].iter().any(|&t| t != PAD) {
            return Err(XbmError::Data("non-PAD token after EOS".into()));
        }
        if ids[..eos].contains(&PAD) {
            return Err(XbmError::Data("PAD before EOS".into()));
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Tokens before EOS.
    pub fn content(&self) -> &[usize] {
        let eos = self.ids.iter().position(|&t| t == EOS).unwrap_or(self.ids.len());
        &self.ids[..eos]
    }

    /// Count of non-PAD positions (content plus EOS).
    pub fn non_pad_len(&self) -> usize {
        self.content().len() + 1
    }
}

/// Per-position distributions over the vocabulary, `[L, |V|]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTokenSequence {
    probs: Tensor,
}

impl SoftTokenSequence {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.ndim() != 2 {
            return Err(XbmError::shape("soft-tokens", format!("{:?}", probs.shape())));
        }
        for r in 0..probs.rows() {
            let row = probs.row(r);
            let s: f64 = row.iter().sum();
            if row.iter().any(|&p| p < 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(XbmError::Data(format!("soft token row {r} is not a distribution")));
            }
        }
        Ok(SoftTokenSequence { probs })
    }

    pub fn one_hot(seq: &TokenSequence, vocab_size: usize) -> Self {
        let l = seq.max_len();
        let mut t = Tensor::zeros(&[l, vocab_size]);
        for (i, &id) in seq.ids().iter().enumerate() {
            t.data_mut()[i * vocab_size + id] = 1.0;
        }
        SoftTokenSequence { probs: t }
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-wise argmax, as a plain id list.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.len())
            .map(|r| {
                let row = self.probs.row(r);
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}
