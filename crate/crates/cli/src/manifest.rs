//! One `manifest.json` per output directory, sufficient to re-run the command.

use std::fs;
use std::path::{Path, PathBuf};

use cddsa::config::ExperimentConfig;
use cddsa::CddsaError;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Command;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand with every argument as given.
    pub command: Command,
    /// Fully resolved configuration (defaults, file, environment and flags).
    pub config: ExperimentConfig,
    /// SHA-256 over the resolved configuration and every input file.
    pub input_hash: String,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<(), CddsaError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CddsaError::Validation(e.to_string()))?;
        fs::write(path, text).map_err(|e| CddsaError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, CddsaError> {
        let text = fs::read_to_string(path).map_err(|e| CddsaError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CddsaError::Config(format!("{}: {e}", path.display())))
    }
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            if e.file_name().is_some_and(|n| n == MANIFEST_FILE) {
                continue;
            }
            collect_files(&e, out)?;
        }
    } else if path.is_file() {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Hashes the configuration followed by each input file's relative path and bytes.
pub fn content_hash(config: &ExperimentConfig, inputs: &[&Path]) -> Result<String, CddsaError> {
    let mut h = Sha256::new();
    h.update(config.to_toml()?.as_bytes());
    for root in inputs {
        let mut files = Vec::new();
        collect_files(root, &mut files).map_err(|e| CddsaError::io(*root, e))?;
        for f in files {
            let rel = f.strip_prefix(root).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update(fs::read(&f).map_err(|e| CddsaError::io(&f, e))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}
