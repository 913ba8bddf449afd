//! Run manifests: one `run_manifest.json` per output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    /// SHA-256 of the configuration file as read, if the command took one.
    pub config_hash: Option<String>,
    /// SHA-256 of the effective configuration after flag overrides.
    pub effective_config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub versions: BTreeMap<String, String>,
    pub inputs: Vec<String>,
    pub outputs: Vec<Artifact>,
    pub started_unix: f64,
    pub wall_clock_seconds: f64,
    pub stage_seconds: BTreeMap<String, f64>,
}

/// Collects manifest fields while a command runs.
pub struct ManifestBuilder {
    command: Vec<String>,
    config_hash: Option<String>,
    effective: String,
    seeds: BTreeMap<String, u64>,
    inputs: Vec<String>,
    started_unix: f64,
    clock: Instant,
    pub stages: BTreeMap<String, f64>,
}

impl ManifestBuilder {
    pub fn new(command: Vec<String>) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        Self {
            command,
            config_hash: None,
            effective: String::new(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            started_unix,
            clock: Instant::now(),
            stages: BTreeMap::new(),
        }
    }

    pub fn config_bytes(&mut self, bytes: &[u8]) {
        self.config_hash = Some(sha256_hex(bytes));
    }

    pub fn effective<T: Serialize>(&mut self, value: &T) {
        self.effective = serde_json::to_string(value).expect("configuration serializes");
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn remove_seed(&mut self, name: &str) {
        self.seeds.remove(name);
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    /// Write the manifest into `dir`, hashing each output file.
    pub fn write(&self, dir: &Path, outputs: &[PathBuf]) -> std::io::Result<()> {
        let mut artifacts = Vec::with_capacity(outputs.len());
        for p in outputs {
            let bytes = std::fs::read(p)?;
            let rel = p.strip_prefix(dir).unwrap_or(p);
            artifacts.push(Artifact { path: rel.display().to_string(), sha256: sha256_hex(&bytes) });
        }
        let mut versions = BTreeMap::new();
        versions.insert("mbsma".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("manifest".to_string(), "1".to_string());
        let m = RunManifest {
            command: self.command.clone(),
            config_hash: self.config_hash.clone(),
            effective_config_hash: sha256_hex(self.effective.as_bytes()),
            seeds: self.seeds.clone(),
            versions,
            inputs: self.inputs.clone(),
            outputs: artifacts,
            started_unix: self.started_unix,
            wall_clock_seconds: self.clock.elapsed().as_secs_f64(),
            stage_seconds: self.stages.clone(),
        };
        let json = serde_json::to_string_pretty(&m).expect("manifest serializes");
        std::fs::write(dir.join(MANIFEST_FILE), json + "\n")
    }
}
