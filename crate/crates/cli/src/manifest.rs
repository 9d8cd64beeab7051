use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every output.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// SHA-256 of the effective configuration serialized as JSON.
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub seed_from_entropy: bool,
    pub version: String,
    pub threads: usize,
    pub started_at: String,
    pub finished_at: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<String>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: sha256_hex(&bytes),
    })
}

/// `report.csv` -> `report.csv.manifest.json`
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub struct ManifestBuilder {
    command: String,
    started_at: String,
    seed: u64,
    seed_from_entropy: bool,
}

impl ManifestBuilder {
    pub fn start(command: &str, seed: u64, seed_from_entropy: bool) -> Self {
        Self {
            command: command.into(),
            started_at: now(),
            seed,
            seed_from_entropy,
        }
    }

    pub fn finish(
        self,
        config: &impl Serialize,
        inputs: &[&Path],
        outputs: &[&Path],
    ) -> Result<RunManifest> {
        let config = serde_json::to_value(config)?;
        let config_sha256 = sha256_hex(serde_json::to_string(&config)?.as_bytes());
        Ok(RunManifest {
            command: self.command,
            args: std::env::args().collect(),
            config_sha256,
            config,
            seed: self.seed,
            seed_from_entropy: self.seed_from_entropy,
            version: env!("CARGO_PKG_VERSION").into(),
            threads: rayon::current_num_threads(),
            started_at: self.started_at,
            finished_at: now(),
            inputs: inputs.iter().map(|p| digest_file(p)).collect::<Result<_>>()?,
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        })
    }
}

impl RunManifest {
    /// Writes the manifest beside the first output.
    pub fn write_beside(&self, output: &Path) -> Result<PathBuf> {
        let path = manifest_path(output);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
