//! Output bookkeeping and the replay manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::commands::Command;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL: &str = "subscale";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub name: String,
    pub bytes: u64,
}

/// Everything needed to rerun a command. Carries no timestamps or thread
/// counts, so identical runs write identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    /// Effective seed; replays pass it as `--seed`.
    pub seed: u64,
    pub command: Command,
    pub outputs: Vec<OutputEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let manifest: Manifest =
            serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        if manifest.tool != TOOL {
            anyhow::bail!("{} was written by `{}`, not {TOOL}", path.display(), manifest.tool);
        }
        Ok(manifest)
    }
}

/// Collects files written into one output directory.
#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    entries: Vec<OutputEntry>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            entries: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let contents = contents.as_ref();
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.record(name, contents.len() as u64);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Registers a file that was written by other means.
    pub fn record(&mut self, name: &str, bytes: u64) {
        self.entries.retain(|e| e.name != name);
        self.entries.push(OutputEntry {
            name: name.to_string(),
            bytes,
        });
    }

    pub fn finish(self, command: Command, seed: u64) -> Result<Manifest> {
        let manifest = Manifest {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            command,
            outputs: self.entries,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(manifest)
    }
}

pub fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).with_context(|| format!("resolving {}", path.display()))
}
