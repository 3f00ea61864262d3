//! Provenance headers and artifact hashing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{CliError, Config};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub prompt_version: Option<String>,
    /// SHA-256 of the canonical JSON form of `config`.
    pub config_hash: String,
    pub config: serde_json::Value,
    /// SHA-256 per artifact file name.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Provenance {
    pub fn new(command: &str, cfg: &Config) -> Result<Self, CliError> {
        let config = serde_json::to_value(cfg)?;
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: cfg.seed,
            prompt_version: None,
            config_hash: sha256_hex(&serde_json::to_vec(&config)?),
            config,
            artifacts: BTreeMap::new(),
        })
    }

    /// Hashes a file already written to `dir` and records it.
    pub fn record_artifact(&mut self, dir: &Path, name: &str) -> Result<(), CliError> {
        let bytes = std::fs::read(dir.join(name))?;
        self.artifacts.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join("provenance.json"), text)?;
        Ok(())
    }
}
