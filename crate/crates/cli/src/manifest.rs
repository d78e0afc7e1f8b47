//! Run manifests: what was run, on which input, producing which files.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct Manifest<S: Serialize> {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: u64,
    /// `sha256` of the input graph files, or of the synthetic graph spec.
    pub input_sha256: String,
    pub input: String,
    pub settings: S,
    pub outputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl<S: Serialize> Manifest<S> {
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Hash of several files, each prefixed by its length so that boundaries
/// are unambiguous.
pub fn hash_files(paths: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
