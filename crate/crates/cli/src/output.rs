use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, Serialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

/// Files written by one run. Dropping it without `finish` removes them.
pub struct OutputDir {
    root: PathBuf,
    created_root: bool,
    files: Vec<FileEntry>,
    done: bool,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        let created_root = !root.exists();
        std::fs::create_dir_all(root).with_context(|| format!("cannot create {}", root.display()))?;
        Ok(OutputDir { root: root.to_path_buf(), created_root, files: Vec::new(), done: false })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        // Register before writing so a failed write is still cleaned up.
        self.files.push(FileEntry { name: name.to_string(), bytes: bytes.len(), sha256: hex::encode(Sha256::digest(bytes)) });
        std::fs::write(&path, bytes).with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_vec_pretty(value)?;
        text.push(b'\n');
        self.write(name, &text)
    }

    pub fn write_csv<S: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = S>) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().context("csv buffer")?;
        self.write(name, &bytes)
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    pub fn finish(mut self) {
        self.done = true;
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if self.done {
            return;
        }
        for f in &self.files {
            let _ = std::fs::remove_file(self.root.join(&f.name));
        }
        if self.created_root {
            let _ = std::fs::remove_dir(&self.root);
        }
    }
}
