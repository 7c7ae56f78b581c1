//! Run manifests: every artifact-producing command drops a
//! `<output>.manifest.json` next to its output recording the command, the
//! resolved configuration, input digests, and the seed, so any artifact can
//! be regenerated from its manifest alone (wall-clock duration excluded).

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub duration_ms: u128,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("reading {} for digest", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Write the manifest beside `output`; returns the manifest path.
pub fn write_manifest<C: Serialize>(
    command: &str,
    config: &C,
    seed: Option<u64>,
    inputs: &[&Path],
    output: &Path,
    extra_outputs: &[&Path],
    started: Instant,
) -> Result<PathBuf> {
    let inputs = inputs
        .iter()
        .map(|p| {
            Ok(InputDigest {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut outputs = vec![output.display().to_string()];
    outputs.extend(extra_outputs.iter().map(|p| p.display().to_string()));
    let manifest = RunManifest {
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config: serde_json::to_value(config)?,
        inputs,
        outputs,
        duration_ms: started.elapsed().as_millis(),
    };
    let path = PathBuf::from(format!("{}.manifest.json", output.display()));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
        .with_context(|| format!("writing manifest {}", path.display()))?;
    Ok(path)
}
