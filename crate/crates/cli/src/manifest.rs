//! `manifest.json`: what a command was asked to do and what it wrote.
//!
//! Holds no timestamps, so rerunning a command with the same config and
//! seed reproduces the manifest byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub container_version: u32,
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
    pub arguments: BTreeMap<String, String>,
    /// Output files relative to the output directory, with their digests.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digests every file under `dir` except an existing manifest.
pub fn hash_outputs(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.with_context(|| format!("walking {}", dir.display()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays under root");
        if rel == Path::new(MANIFEST_FILE) {
            continue;
        }
        let bytes = std::fs::read(entry.path()).with_context(|| format!("reading {}", entry.path().display()))?;
        out.insert(rel.to_string_lossy().replace('\\', "/"), sha256_hex(&bytes));
    }
    Ok(out)
}

impl Manifest {
    /// Written last, after every per-frame output exists.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}
