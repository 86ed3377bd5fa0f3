//! Provenance record written next to every command's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use peel_core::model::{MODEL_FILE, WEIGHTS_FILE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Paths are deliberately absent: files are identified by content hash, so
/// the same run from another directory yields the same manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    /// Every solver and model option with defaults filled in.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub model_hash: Option<String>,
    pub input_hashes: BTreeMap<String, String>,
    pub output_hashes: BTreeMap<String, String>,
    /// Image values clamped into 0–255 on write.
    pub clamped_values: usize,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        Self {
            tool: "peel".into(),
            tool_version: TOOL_VERSION.into(),
            command: command.into(),
            config: serde_json::to_value(config).expect("config serializes"),
            seeds: BTreeMap::new(),
            model_hash: None,
            input_hashes: BTreeMap::new(),
            output_hashes: BTreeMap::new(),
            clamped_values: 0,
        }
    }

    pub fn seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.into(), seed);
        self
    }

    pub fn model(&mut self, dir: &Path) -> CliResult<()> {
        self.model_hash = Some(hash_model(dir)?);
        Ok(())
    }

    pub fn input(&mut self, role: &str, path: &Path) -> CliResult<()> {
        self.input_hashes.insert(role.into(), hash_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, role: &str, path: &Path) -> CliResult<()> {
        self.output_hashes.insert(role.into(), hash_file(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        write_json(self, path)
    }
}

/// `DIR/manifest.json` for directory outputs, `FILE.manifest.json` otherwise.
pub fn manifest_path(output: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        output.join("manifest.json")
    } else {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        output.with_file_name(name)
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hash_bytes(&bytes))
}

/// Hash of `model.json` followed by `weights.bin`.
pub fn hash_model(dir: &Path) -> CliResult<String> {
    let mut h = Sha256::new();
    for name in [MODEL_FILE, WEIGHTS_FILE] {
        let path = dir.join(name);
        h.update(fs::read(&path).map_err(|e| CliError::io(&path, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn write_json(value: &impl Serialize, path: &Path) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_paths() {
        assert_eq!(
            manifest_path(Path::new("out/x.tns"), false),
            PathBuf::from("out/x.tns.manifest.json")
        );
        assert_eq!(
            manifest_path(Path::new("model"), true),
            PathBuf::from("model/manifest.json")
        );
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            hash_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
