//! Procedural scenes of attributed shapes on a grid.
//!
//! Everything here is a pure function of `(seed, spec)`: scenes, their
//! rasterization and masks, grammar captions, and the corpus splits used
//! for captioner pretraining, the target task, and interventions.

mod corpus;
mod dataset;
mod grammar;
mod render;

use std::fmt;
use std::str::FromStr;

pub use corpus::{build_corpora, Corpora, CorpusConfig, Example, Split};
pub use dataset::{read_split, write_split, DatasetHeader};
pub use grammar::{caption, parse_caption, position_words, ObjectAttrs};
pub use render::{render, Rendering, COLOR_RGB};

use crate::error::{Result, XbmError};
use crate::io::KvConfig;
use crate::rng::Rng;

macro_rules! named_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }

        impl FromStr for $name {
            type Err = XbmError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($name::$variant),)+
                    _ => Err(XbmError::Data(format!(
                        concat!("unknown ", stringify!($name), " `{}`"), s))),
                }
            }
        }
    };
}

named_enum!(Shape {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
    Cross => "cross",
    Diamond => "diamond",
    Ring => "ring",
});

named_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Purple => "purple",
    Orange => "orange",
});

named_enum!(Size {
    Small => "small",
    Large => "large",
});

/// Layout and attribute sets of a world. Class count is
/// `shapes.len() * colors.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub rows: usize,
    pub cols: usize,
    pub shapes: Vec<Shape>,
    pub colors: Vec<Color>,
    pub height: usize,
    pub width: usize,
    /// Caption bound `L`, EOS included.
    pub max_len: usize,
    pub backgrounds: Vec<[f64; 3]>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            rows: 2,
            cols: 2,
            shapes: vec![Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross],
            colors: vec![Color::Red, Color::Green],
            height: 32,
            width: 32,
            max_len: 36,
            backgrounds: vec![[0.0, 0.0, 0.0], [0.25, 0.25, 0.25], [0.375, 0.375, 0.5]],
        }
    }
}

impl SceneSpec {
    pub fn num_classes(&self) -> usize {
        self.shapes.len() * self.colors.len()
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn cell_height(&self) -> usize {
        self.height / self.rows
    }

    pub fn cell_width(&self) -> usize {
        self.width / self.cols
    }

    pub fn class_of(&self, shape: Shape, color: Color) -> Option<usize> {
        let s = self.shapes.iter().position(|&x| x == shape)?;
        let c = self.colors.iter().position(|&x| x == color)?;
        Some(s * self.colors.len() + c)
    }

    pub fn class_attrs(&self, label: usize) -> Option<(Shape, Color)> {
        if label >= self.num_classes() {
            return None;
        }
        let nc = self.colors.len();
        Some((self.shapes[label / nc], self.colors[label % nc]))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(XbmError::config("scene", msg));
        if !(1..=3).contains(&self.rows) || !(1..=3).contains(&self.cols) {
            return bad("grid must be between 1x1 and 3x3");
        }
        if self.height % self.rows != 0 || self.width % self.cols != 0 {
            return bad("image size must divide evenly into grid cells");
        }
        if self.cell_height() < 8 || self.cell_width() < 8 {
            return bad("grid cells must be at least 8 pixels");
        }
        if self.shapes.is_empty() || self.colors.is_empty() || self.backgrounds.is_empty() {
            return bad("shape, color and background sets must be nonempty");
        }
        let distinct = |n: usize, v: Vec<usize>| {
            let mut v = v;
            v.sort_unstable();
            v.dedup();
            v.len() == n
        };
        if !distinct(self.shapes.len(), self.shapes.iter().map(|&s| s as usize).collect())
            || !distinct(self.colors.len(), self.colors.iter().map(|&c| c as usize).collect())
        {
            return bad("shape and color sets must not repeat entries");
        }
        // The longest caption (every cell filled) must fit.
        let longest = self.cells() * grammar::phrase_len(self) + self.cells() - 1;
        if longest + 1 > self.max_len {
            return bad(&format!(
                "max_len {} cannot hold a full-grid caption of {} tokens plus EOS",
                self.max_len, longest
            ));
        }
        Ok(())
    }

    /// Read spec keys from a config, falling back to defaults.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let d = SceneSpec::default();
        let backgrounds = match kv.get_list::<String>("backgrounds")? {
            None => d.backgrounds,
            Some(items) => items
                .iter()
                .map(|item| {
                    let parts: Vec<f64> = item
                        .split('/')
                        .map(|p| p.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| XbmError::config("backgrounds", format!("bad color `{item}`")))?;
                    <[f64; 3]>::try_from(parts)
                        .map_err(|_| XbmError::config("backgrounds", format!("bad color `{item}`")))
                })
                .collect::<Result<_>>()?,
        };
        let spec = SceneSpec {
            rows: kv.get_or("rows", d.rows)?,
            cols: kv.get_or("cols", d.cols)?,
            shapes: kv.get_list("shapes")?.unwrap_or(d.shapes),
            colors: kv.get_list("colors")?.unwrap_or(d.colors),
            height: kv.get_or("height", d.height)?,
            width: kv.get_or("width", d.width)?,
            max_len: kv.get_or("max_len", d.max_len)?,
            backgrounds,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_echo(text: &str) -> Result<Self> {
        let mut kv = KvConfig::parse(text)?;
        let spec = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(spec)
    }

    /// `key = value` lines describing the spec; echoed into dataset headers.
    pub fn echo(&self) -> String {
        let join = |v: Vec<&str>| v.join(",");
        let bgs: Vec<String> = self
            .backgrounds
            .iter()
            .map(|c| format!("{}/{}/{}", c[0], c[1], c[2]))
            .collect();
        format!(
            "rows = {}\ncols = {}\nshapes = {}\ncolors = {}\nheight = {}\nwidth = {}\nmax_len = {}\nbackgrounds = {}\n",
            self.rows,
            self.cols,
            join(self.shapes.iter().map(|s| s.word()).collect()),
            join(self.colors.iter().map(|c| c.word()).collect()),
            self.height,
            self.width,
            self.max_len,
            bgs.join(",")
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// Row-major cell index.
    pub cell: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub target: usize,
    pub background: usize,
}

impl Scene {
    /// Build a scene and designate its target: the largest object, ties
    /// going to the top-left-most (lowest) cell.
    pub fn new(objects: Vec<SceneObject>, background: usize) -> Result<Self> {
        if objects.is_empty() {
            return Err(XbmError::Data("scene needs at least one object".into()));
        }
        let mut cells: Vec<usize> = objects.iter().map(|o| o.cell).collect();
        cells.sort_unstable();
        cells.dedup();
        if cells.len() != objects.len() {
            return Err(XbmError::Data("two objects share a cell".into()));
        }
        let target = target_index(&objects);
        Ok(Scene {
            objects,
            target,
            background,
        })
    }

    pub fn target_object(&self) -> &SceneObject {
        &self.objects[self.target]
    }

    pub fn label(&self, spec: &SceneSpec) -> Result<usize> {
        let t = self.target_object();
        spec.class_of(t.shape, t.color)
            .ok_or_else(|| XbmError::Data("target attributes outside the spec".into()))
    }

    /// Sorted attribute multiset.
    pub fn attributes(&self) -> Vec<ObjectAttrs> {
        let mut v: Vec<ObjectAttrs> = self.objects.iter().map(ObjectAttrs::from).collect();
        v.sort();
        v
    }
}

fn target_index(objects: &[SceneObject]) -> usize {
    let mut best = 0;
    for (i, o) in objects.iter().enumerate().skip(1) {
        let b = &objects[best];
        if o.size > b.size || (o.size == b.size && o.cell < b.cell) {
            best = i;
        }
    }
    best
}

/// Deterministic scene for a seed: object count uniform in `[1, cells]`,
/// distinct cells, attributes uniform over the spec's sets.
pub fn sample_scene(seed: u64, spec: &SceneSpec) -> Scene {
    let mut rng = Rng::new(seed);
    let cells = spec.cells();
    let count = 1 + rng.below(cells);
    let mut order: Vec<usize> = (0..cells).collect();
    rng.shuffle(&mut order);
    let objects = order[..count]
        .iter()
        .map(|&cell| SceneObject {
            shape: spec.shapes[rng.below(spec.shapes.len())],
            color: spec.colors[rng.below(spec.colors.len())],
            size: Size::ALL[rng.below(2)],
            cell,
        })
        .collect();
    let background = rng.below(spec.backgrounds.len());
    Scene::new(objects, background).expect("sampled cells are distinct")
}
