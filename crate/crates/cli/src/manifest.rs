//! `run_manifest.json`: one entry per stage, merged across invocations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config: serde_json::Value,
    /// sha256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every file written.
    pub outputs: BTreeMap<String, String>,
    pub elapsed_ms: u64,
    pub finished_unix_ms: u64,
    pub version: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_file(p: &Path) -> Result<String> {
    let bytes = fs::read(p).with_context(|| format!("hashing {}", p.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects the files a stage touches, then records them.
#[derive(Debug, Default)]
pub struct StageFiles {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl StageFiles {
    pub fn input(&mut self, p: impl Into<PathBuf>) {
        self.inputs.push(p.into());
    }

    pub fn output(&mut self, p: impl Into<PathBuf>) {
        self.outputs.push(p.into());
    }
}

fn checksums(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

pub fn record_stage(
    out_dir: &Path,
    stage: &str,
    config: serde_json::Value,
    files: &StageFiles,
    elapsed_ms: u64,
) -> Result<()> {
    let path = out_dir.join(MANIFEST_FILE);
    let mut manifest: RunManifest = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
        Err(_) => RunManifest::default(),
    };
    let finished_unix_ms = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    manifest.stages.insert(
        stage.to_string(),
        StageRecord {
            config,
            inputs: checksums(&files.inputs)?,
            outputs: checksums(&files.outputs)?,
            elapsed_ms,
            finished_unix_ms,
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    );
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stages_merge() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("a.txt");
        fs::write(&f, "abc").unwrap();
        let mut files = StageFiles::default();
        files.output(&f);
        record_stage(dir.path(), "one", serde_json::json!({}), &files, 1).unwrap();
        record_stage(dir.path(), "two", serde_json::json!({}), &StageFiles::default(), 2).unwrap();
        let m: RunManifest =
            serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(m.stages.len(), 2);
        assert_eq!(
            m.stages["one"].outputs[&f.display().to_string()],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
