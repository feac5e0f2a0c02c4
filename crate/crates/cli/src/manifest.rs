//! Reproducibility manifest: config hash plus content hashes of every
//! input read and output written. Holds no timestamps.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(subcommand: &str, seed: u64, config: &Config) -> Result<Self> {
        let canonical = serde_json::to_vec(config)?;
        Ok(Self {
            subcommand: subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_hash: hex::encode(Sha256::digest(&canonical)),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    /// Outputs are keyed by name relative to the output directory.
    pub fn add_output(&mut self, name: &str, path: &Path) -> Result<()> {
        let hash = sha256_file(path)?;
        self.outputs.insert(name.to_string(), hash);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
