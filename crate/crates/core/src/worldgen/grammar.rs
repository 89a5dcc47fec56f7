//! Caption grammar.
//!
//! ```text
//! caption  := phrase ( "," phrase )*
//! phrase   := "a" size color shape "in" "the" position
//! position := row-word? col-word?        ("center" on a 1x1 grid)
//! ```
//!
//! Style 0 lists objects in reading order, style 1 lists large objects
//! first (reading order within each size).

use super::{Color, Scene, SceneObject, SceneSpec, Shape, Size};
use crate::error::{Result, XbmError};
use crate::nn::text::{TokenSequence, Vocabulary};

/// Attributes of one object, ordered for multiset comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectAttrs {
    pub cell: usize,
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
}

impl From<&SceneObject> for ObjectAttrs {
    fn from(o: &SceneObject) -> Self {
        ObjectAttrs {
            cell: o.cell,
            shape: o.shape,
            color: o.color,
            size: o.size,
        }
    }
}

const ROW_WORDS: [&[&str]; 3] = [&[], &["top", "bottom"], &["top", "middle", "bottom"]];
const COL_WORDS: [&[&str]; 3] = [&[], &["left", "right"], &["left", "center", "right"]];

pub fn position_words(cell: usize, spec: &SceneSpec) -> Vec<&'static str> {
    if spec.rows == 1 && spec.cols == 1 {
        return vec!["center"];
    }
    let mut words = Vec::with_capacity(2);
    if spec.rows > 1 {
        words.push(ROW_WORDS[spec.rows - 1][cell / spec.cols]);
    }
    if spec.cols > 1 {
        words.push(COL_WORDS[spec.cols - 1][cell % spec.cols]);
    }
    words
}

pub(crate) fn phrase_len(spec: &SceneSpec) -> usize {
    6 + position_words(0, spec).len()
}

/// Grammar caption of a scene as a padded token sequence of length
/// `spec.max_len`. `style_seed` picks the object ordering.
pub fn caption(scene: &Scene, spec: &SceneSpec, vocab: &Vocabulary, style_seed: u64) -> Result<TokenSequence> {
    let mut objs: Vec<&SceneObject> = scene.objects.iter().collect();
    match style_seed % 2 {
        0 => objs.sort_by_key(|o| o.cell),
        _ => objs.sort_by_key(|o| (std::cmp::Reverse(o.size), o.cell)),
    }
    let mut words: Vec<&str> = Vec::new();
    for (i, o) in objs.iter().enumerate() {
        if i > 0 {
            words.push(",");
        }
        words.extend(["a", o.size.word(), o.color.word(), o.shape.word(), "in", "the"]);
        words.extend(position_words(o.cell, spec));
    }
    let ids = vocab.encode(&words)?;
    TokenSequence::from_content(&ids, spec.max_len)
}

/// Parse caption content (tokens before EOS) back into its sorted attribute
/// multiset. Fails on anything the grammar cannot produce.
pub fn parse_caption(content: &[usize], spec: &SceneSpec, vocab: &Vocabulary) -> Result<Vec<ObjectAttrs>> {
    let words: Vec<&str> = content
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("<unk>"))
        .collect();
    let plen = phrase_len(spec);
    let mut out = Vec::new();
    let mut i = 0;
    let fail = |at: usize, msg: &str| XbmError::Data(format!("caption parse error at token {at}: {msg}"));
    if words.is_empty() {
        return Err(fail(0, "empty caption"));
    }
    loop {
        if i + plen > words.len() {
            return Err(fail(i, "truncated phrase"));
        }
        let p = &words[i..i + plen];
        if p[0] != "a" || p[4] != "in" || p[5] != "the" {
            return Err(fail(i, "expected `a ... in the ...`"));
        }
        let size: Size = p[1].parse().map_err(|_| fail(i + 1, "size"))?;
        let color: Color = p[2].parse().map_err(|_| fail(i + 2, "color"))?;
        let shape: Shape = p[3].parse().map_err(|_| fail(i + 3, "shape"))?;
        let cell = (0..spec.cells())
            .find(|&c| position_words(c, spec) == p[6..])
            .ok_or_else(|| fail(i + 6, "position"))?;
        out.push(ObjectAttrs {
            cell,
            shape,
            color,
            size,
        });
        i += plen;
        if i == words.len() {
            break;
        }
        if words[i] != "," {
            return Err(fail(i, "expected `,`"));
        }
        i += 1;
    }
    out.sort();
    let mut cells: Vec<usize> = out.iter().map(|o| o.cell).collect();
    cells.dedup();
    if cells.len() != out.len() {
        return Err(fail(0, "two phrases name the same cell"));
    }
    Ok(out)
}
