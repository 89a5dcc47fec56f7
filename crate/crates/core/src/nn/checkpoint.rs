//! Checkpoint files.
//!
//! ```text
//! "XBMC" | version u16 | config echo (u32 len + UTF-8) | trees u32
//! per tree:  name (u32 len + UTF-8) | params u32
//! per param: name (u32 len + UTF-8) | ndim u32 | dims u32 each | f64 values
//! ```
//!
//! Little-endian throughout. Student and teacher are separate named trees.

use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Result, XbmError};
use crate::io::{read_file, write_file, ByteReader, ByteWriter};

const MAGIC: &[u8; 4] = b"XBMC";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTree {
    pub name: String,
    pub params: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_echo: String,
    pub trees: Vec<NamedTree>,
}

impl Checkpoint {
    pub fn new(config_echo: impl Into<String>) -> Self {
        Checkpoint {
            config_echo: config_echo.into(),
            trees: Vec::new(),
        }
    }

    pub fn add_tree(&mut self, name: &str, store: &ParamStore) {
        self.trees.push(NamedTree {
            name: name.to_string(),
            params: store
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        });
    }

    pub fn tree(&self, name: &str) -> Result<&NamedTree> {
        self.trees
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| XbmError::Data(format!("checkpoint has no tree `{name}`")))
    }

    pub fn has_tree(&self, name: &str) -> bool {
        self.trees.iter().any(|t| t.name == name)
    }

    /// Copy a stored tree into a freshly built model store. Names and shapes
    /// must match one to one.
    pub fn load_into(&self, name: &str, store: &mut ParamStore) -> Result<()> {
        let tree = self.tree(name)?;
        if tree.params.len() != store.len() {
            return Err(XbmError::Data(format!(
                "tree `{name}` has {} parameters, model has {}",
                tree.params.len(),
                store.len()
            )));
        }
        for ((pname, value), p) in tree.params.iter().zip(store.params_mut()) {
            if *pname != p.name || value.shape() != p.value.shape() {
                return Err(XbmError::Data(format!(
                    "tree `{name}`: stored `{pname}` {:?} does not match model `{}` {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.string(&self.config_echo);
        w.u32(self.trees.len() as u32);
        for t in &self.trees {
            w.string(&t.name);
            w.u32(t.params.len() as u32);
            for (name, value) in &t.params {
                w.string(name);
                w.u32(value.ndim() as u32);
                for &d in value.shape() {
                    w.u32(d as u32);
                }
                for &v in value.data() {
                    w.f64(v);
                }
            }
        }
        w.into_inner()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(XbmError::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(XbmError::Data(format!("unsupported checkpoint version {version}")));
        }
        let config_echo = r.string()?;
        let ntrees = r.u32()? as usize;
        let mut trees = Vec::with_capacity(ntrees);
        for _ in 0..ntrees {
            let name = r.string()?;
            let n = r.u32()? as usize;
            let mut params = Vec::with_capacity(n);
            for _ in 0..n {
                let pname = r.string()?;
                let ndim = r.u32()? as usize;
                let shape = (0..ndim)
                    .map(|_| r.u32().map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                let numel: usize = shape.iter().product();
                let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                params.push((pname, Tensor::new(shape, data)?));
            }
            trees.push(NamedTree { name, params });
        }
        if !r.is_at_end() {
            return Err(XbmError::Data("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint { config_echo, trees })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}
