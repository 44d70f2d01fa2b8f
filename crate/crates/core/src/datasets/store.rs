use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::error::{Error, Result};

/// Images addressed by the `path` field of manifest records: either held in
/// memory (synthetic data in tests) or read from files under a root directory.
#[derive(Debug, Clone, Default)]
pub struct ImageStore {
    root: Option<PathBuf>,
    memory: HashMap<String, RgbImage>,
}

impl ImageStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(root: impl Into<PathBuf>) -> Self {
        Self {
            root: Some(root.into()),
            memory: HashMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, image: RgbImage) {
        self.memory.insert(path.into(), image);
    }

    pub fn len(&self) -> usize {
        self.memory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memory.is_empty()
    }

    pub fn load(&self, path: &str) -> Result<RgbImage> {
        if let Some(img) = self.memory.get(path) {
            return Ok(img.clone());
        }
        let root = self
            .root
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("image '{path}' not in the in-memory store")))?;
        let full = root.join(path);
        let img = image::open(&full).map_err(|source| Error::Image {
            path: full.clone(),
            source,
        })?;
        Ok(img.to_rgb8())
    }

    /// Writes every in-memory image under `root` as PNG.
    pub fn write_all(&self, root: &Path) -> Result<()> {
        let mut keys: Vec<&String> = self.memory.keys().collect();
        keys.sort();
        for k in keys {
            let dest = root.join(k);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            self.memory[k].save(&dest).map_err(|source| Error::Image {
                path: dest.clone(),
                source,
            })?;
        }
        Ok(())
    }
}
