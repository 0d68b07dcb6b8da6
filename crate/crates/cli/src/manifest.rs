use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;

use valuelens::digest::sha256_hex;

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// SHA-256 of the effective settings (backend configs and command options).
    pub config_hash: String,
    pub inputs: BTreeMap<String, InputDigest>,
    pub outputs: BTreeMap<String, String>,
    /// RFC 3339; honours `SOURCE_DATE_EPOCH` for reproducible builds of outputs.
    pub timestamp: String,
    pub seed: Option<u64>,
}

fn timestamp() -> String {
    let at = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .and_then(|secs| DateTime::<Utc>::from_timestamp(secs, 0))
        .unwrap_or_else(Utc::now);
    at.to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Collects inputs and outputs of one run, then writes them with the manifest.
pub struct Run {
    out_dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    pub fn new(command: &str, out_dir: &Path, seed: Option<u64>) -> Result<Self, CliError> {
        Ok(Run {
            out_dir: out_dir.to_path_buf(),
            manifest: RunManifest {
                command: command.into(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                config_hash: sha256_hex(b"null"),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                timestamp: timestamp(),
                seed,
            },
        })
    }

    pub fn settings(&mut self, settings: &serde_json::Value) {
        let bytes = serde_json::to_vec(settings).expect("settings serialize");
        self.manifest.config_hash = sha256_hex(&bytes);
    }

    /// Reads an input file and records its digest under `role`.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
        self.manifest.inputs.insert(
            role.into(),
            InputDigest {
                path: path.display().to_string(),
                sha256: sha256_hex(&bytes),
            },
        );
        Ok(bytes)
    }

    pub fn output_path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// The output directory is created on first write, so failed runs leave nothing behind.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        self.create_dir()?;
        let path = self.output_path(name);
        fs::write(&path, bytes).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
        self.manifest.outputs.insert(name.into(), sha256_hex(bytes));
        Ok(())
    }

    fn create_dir(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.out_dir).map_err(|e| {
            CliError::Input(format!("cannot create output directory {}: {e}", self.out_dir.display()))
        })
    }

    pub fn finish(self) -> Result<RunManifest, CliError> {
        self.create_dir()?;
        let mut json = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        json.push(b'\n');
        let path = self.out_dir.join(MANIFEST_FILE);
        fs::write(&path, json).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))?;
        Ok(self.manifest)
    }
}
