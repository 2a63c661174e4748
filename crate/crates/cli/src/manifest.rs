use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Resolved configuration of one run plus hashes of what it wrote. Holds
/// nothing time- or host-dependent, so identical runs write identical
/// manifests.
#[derive(Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub config: Value,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &'static str, seed: Option<u64>, config: Value) -> Self {
        Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config,
            outputs: BTreeMap::new(),
        }
    }

    /// Records the SHA-256 of `rel` (relative to `out`).
    pub fn record(&mut self, out: &Path, rel: &str) -> std::io::Result<()> {
        let bytes = fs::read(out.join(rel))?;
        self.outputs.insert(rel.to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    pub fn write(&self, out: &Path) -> anyhow::Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        fs::write(out.join("manifest.json"), json)?;
        Ok(())
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut json = serde_json::to_vec_pretty(value)?;
    json.push(b'\n');
    fs::write(path, json)?;
    Ok(())
}
