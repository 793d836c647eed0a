//! Run manifests: everything needed to reproduce a run, plus the hash that
//! every output file carries.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

impl InputFile {
    pub fn hash(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CliError::data("reading input", format!("{}: {e}", path.display())))?;
        Ok(InputFile {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

/// The reproducible part of a run. Its SHA-256 over the canonical JSON
/// encoding is the manifest hash.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub master_seed: Option<u64>,
    /// Seeds derived from the master seed, by purpose.
    pub derived_seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputFile>,
    /// Modeling choices in effect, including command-line overrides.
    pub decisions: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, master_seed: Option<u64>) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            master_seed,
            derived_seeds: BTreeMap::new(),
            inputs: Vec::new(),
            decisions: BTreeMap::new(),
        }
    }

    pub fn decide(&mut self, key: &str, value: impl ToString) {
        self.decisions.insert(key.to_string(), value.to_string());
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// First line of every CSV output.
    pub fn comment(&self) -> String {
        format!("manifest_sha256={}", self.hash())
    }

    /// Writes `manifest.json`: the hashed content plus wall-clock details
    /// that are not part of the hash.
    pub fn write(&self, dir: &Path, started: SystemTime, threads: usize) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Wrapper<'a> {
            manifest_sha256: String,
            #[serde(flatten)]
            manifest: &'a RunManifest,
            started_unix: u64,
            finished_unix: u64,
            threads: usize,
        }
        let secs = |t: SystemTime| t.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let w = Wrapper {
            manifest_sha256: self.hash(),
            manifest: self,
            started_unix: secs(started),
            finished_unix: secs(SystemTime::now()),
            threads,
        };
        let text = serde_json::to_string_pretty(&w).expect("manifest serializes");
        crate::write_file(&dir.join("manifest.json"), text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_depends_on_content_only() {
        let mut a = RunManifest::new("analyze", &serde_json::json!({"k": 1}), Some(3));
        let b = a.clone();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        a.decide("tilting", "ow");
        assert_ne!(a.hash(), b.hash());
    }
}
