//! Run manifests: resolved config, seed and artifact hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cdal::config::Config;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub args: Vec<String>,
    pub config: Config,
    /// SHA-256 of every file under the output directory, keyed by relative path.
    pub artifacts: BTreeMap<String, String>,
}

/// Reads a TOML config, or the config embedded in a manifest when the file is JSON.
pub fn load_config(path: &Path) -> Result<Config> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let manifest: Manifest =
            serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))?;
        Ok(manifest.config)
    } else {
        Ok(Config::load(path)?)
    }
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            files_under(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes the contents of `out` and writes `out/manifest.json`.
pub fn write(out: &Path, command: &str, config: &Config, seed: u64) -> Result<()> {
    let mut files = Vec::new();
    files_under(out, &mut files)?;
    let mut artifacts = BTreeMap::new();
    for file in files {
        let rel = file.strip_prefix(out).unwrap_or(&file);
        if rel == Path::new(FILE_NAME) {
            continue;
        }
        artifacts.insert(rel.to_string_lossy().replace('\\', "/"), sha256_file(&file)?);
    }
    let manifest = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        args: std::env::args().skip(1).collect(),
        config: config.clone(),
        artifacts,
    };
    let path = out.join(FILE_NAME);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
