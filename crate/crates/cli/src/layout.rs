use std::path::{Path, PathBuf};

use xbm_core::worldgen::Split;

/// File layout under the output root.
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: PathBuf) -> Self {
        Layout { root }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn split(&self, split: Split) -> PathBuf {
        self.data_dir().join(format!("{}.xbmd", split.name()))
    }

    pub fn vocab(&self) -> PathBuf {
        self.data_dir().join("vocab.txt")
    }

    pub fn captioner(&self) -> PathBuf {
        self.root.join("pretrain").join("captioner.xbmc")
    }

    pub fn judges(&self) -> PathBuf {
        self.root.join("judges").join("judges.xbmc")
    }

    pub fn run_dir(&self, name: &str) -> PathBuf {
        self.root.join("runs").join(name)
    }

    pub fn ablate_dir(&self) -> PathBuf {
        self.root.join("ablate")
    }

    /// Manifest sitting next to a stage's main output.
    pub fn manifest(dir: &Path) -> PathBuf {
        dir.join("manifest.txt")
    }
}
