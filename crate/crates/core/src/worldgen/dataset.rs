//! Binary split files.
//!
//! ```text
//! header:  "XBMD" | version u16 | split name (u32 len + UTF-8)
//!          | count u32 | height u16 | width u16 | channels u16
//!          | spec echo (u32 len + UTF-8 `key = value` lines)
//! record:  id u64
//!          | image: height*width*channels f32, row-major HWC
//!          | label u16
//!          | caption: len u16 (0 = absent), then len token ids u16
//!          | background u8 | target u8 | objects u8
//!          | per object: shape u8, color u8, size u8, cell u8
//!          | per object mask: runs u16, then run lengths u16, alternating
//!            background/foreground and starting with background
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use super::{Color, Example, Scene, SceneObject, SceneSpec, Shape, Size, Split};
use crate::error::{Result, XbmError};
use crate::io::{read_file, write_file, ByteReader, ByteWriter};
use crate::nn::text::{TokenSequence, Vocabulary};

const MAGIC: &[u8; 4] = b"XBMD";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub version: u16,
    pub split: Split,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub spec: SceneSpec,
}

pub fn encode_split(split: Split, spec: &SceneSpec, examples: &[Example]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.string(split.name());
    w.u32(examples.len() as u32);
    w.u16(spec.height as u16);
    w.u16(spec.width as u16);
    w.u16(3);
    w.string(&spec.echo());
    for ex in examples {
        w.u64(ex.id);
        for &v in &ex.image {
            w.f32(v as f32);
        }
        w.u16(ex.label as u16);
        match &ex.caption {
            Some(c) => {
                w.u16(c.ids().len() as u16);
                for &t in c.ids() {
                    w.u16(t as u16);
                }
            }
            None => w.u16(0),
        }
        w.u8(ex.scene.background as u8);
        w.u8(ex.scene.target as u8);
        w.u8(ex.scene.objects.len() as u8);
        for o in &ex.scene.objects {
            w.u8(o.shape as u8);
            w.u8(o.color as u8);
            w.u8(o.size as u8);
            w.u8(o.cell as u8);
        }
        for m in &ex.masks {
            let runs = run_lengths(m);
            w.u16(runs.len() as u16);
            for r in runs {
                w.u16(r as u16);
            }
        }
    }
    Ok(w.into_inner())
}

pub fn decode_split(bytes: &[u8], vocab: &Vocabulary) -> Result<(DatasetHeader, Vec<Example>)> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(XbmError::Data("not a dataset file (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(XbmError::Data(format!("unsupported dataset version {version}")));
    }
    let split: Split = r.string()?.parse()?;
    let count = r.u32()? as usize;
    let height = r.u16()? as usize;
    let width = r.u16()? as usize;
    let channels = r.u16()? as usize;
    let spec = SceneSpec::from_echo(&r.string()?)?;
    if channels != 3 || height != spec.height || width != spec.width {
        return Err(XbmError::Data("header dimensions disagree with spec echo".into()));
    }
    let npx = height * width;
    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.u64()?;
        let mut image = Vec::with_capacity(npx * 3);
        for _ in 0..npx * 3 {
            image.push(r.f32()? as f64);
        }
        let label = r.u16()? as usize;
        let clen = r.u16()? as usize;
        let caption = if clen == 0 {
            None
        } else {
            let ids = (0..clen)
                .map(|_| r.u16().map(|t| t as usize))
                .collect::<Result<Vec<_>>>()?;
            Some(TokenSequence::from_ids(ids, vocab.len())?)
        };
        let background = r.u8()? as usize;
        let target = r.u8()? as usize;
        let n = r.u8()? as usize;
        let mut objects = Vec::with_capacity(n);
        for _ in 0..n {
            let shape = *Shape::ALL
                .get(r.u8()? as usize)
                .ok_or_else(|| XbmError::Data("bad shape code".into()))?;
            let color = *Color::ALL
                .get(r.u8()? as usize)
                .ok_or_else(|| XbmError::Data("bad color code".into()))?;
            let size = *Size::ALL
                .get(r.u8()? as usize)
                .ok_or_else(|| XbmError::Data("bad size code".into()))?;
            let cell = r.u8()? as usize;
            objects.push(SceneObject {
                shape,
                color,
                size,
                cell,
            });
        }
        let scene = Scene::new(objects, background)?;
        if scene.target != target {
            return Err(XbmError::Data(format!("example {id}: stored target disagrees with scene")));
        }
        let mut masks = Vec::with_capacity(n);
        for _ in 0..n {
            let runs = r.u16()? as usize;
            let lens = (0..runs)
                .map(|_| r.u16().map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            masks.push(expand_runs(&lens, npx)?);
        }
        examples.push(Example {
            id,
            scene,
            image,
            label,
            caption,
            masks,
        });
    }
    if !r.is_at_end() {
        return Err(XbmError::Data("trailing bytes after last record".into()));
    }
    let header = DatasetHeader {
        version,
        split,
        count,
        height,
        width,
        spec,
    };
    Ok((header, examples))
}

pub fn write_split(path: &Path, split: Split, spec: &SceneSpec, examples: &[Example]) -> Result<()> {
    write_file(path, &encode_split(split, spec, examples)?)
}

pub fn read_split(path: &Path, vocab: &Vocabulary) -> Result<(DatasetHeader, Vec<Example>)> {
    decode_split(&read_file(path)?, vocab)
}

fn run_lengths(mask: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &m in mask {
        if m == current {
            len += 1;
        } else {
            runs.push(len);
            current = m;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

fn expand_runs(runs: &[usize], npx: usize) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(npx);
    for (i, &len) in runs.iter().enumerate() {
        out.extend(std::iter::repeat(i % 2 == 1).take(len));
    }
    if out.len() != npx {
        return Err(XbmError::Data(format!(
            "mask runs cover {} pixels, expected {npx}",
            out.len()
        )));
    }
    Ok(out)
}
