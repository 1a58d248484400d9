//! Run manifests: what a finished command consumed and produced.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::config::RunConfig;
use crate::data::FileDigest;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: u32,
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    /// Every file the command wrote, relative to the output directory.
    pub outputs: Vec<FileDigest>,
}

impl RunManifest {
    /// Digests `outputs` (relative to `dir`) and assembles the manifest.
    pub fn build(command: &str, config: &RunConfig, inputs: Vec<FileDigest>, dir: &Path, outputs: &[&str]) -> Result<Self> {
        let outputs = outputs
            .iter()
            .map(|name| Ok(FileDigest::of_bytes(*name, &fs::read(dir.join(name))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(RunManifest {
            version: MANIFEST_VERSION,
            command: command.to_string(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config: config.clone(),
            inputs,
            outputs,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let value: serde_json::Value = serde_json::from_slice(&fs::read(&path)?)?;
        let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != MANIFEST_VERSION {
            return Err(Error::SchemaVersion {
                artifact: "manifest",
                found,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }

    /// Re-hashes every listed output and reports the first mismatch.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for out in &self.outputs {
            let now = FileDigest::of_bytes(out.file.as_str(), &fs::read(dir.join(&out.file))?);
            if now.sha256 != out.sha256 {
                return Err(Error::Validation(format!("{} changed since the manifest was written", out.file)));
            }
        }
        Ok(())
    }
}

/// Creates `dir` if needed and refuses directories that already hold a
/// completed run.
pub fn guard_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    if dir.join(MANIFEST_FILE).exists() {
        return Err(Error::AlreadyComplete(dir.to_path_buf()));
    }
    Ok(())
}
