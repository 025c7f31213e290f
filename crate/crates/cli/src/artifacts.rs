//! Atomic output files and the manifests that describe them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| CliError::Output(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::Output(format!("{}: {e}", path.display()))
    })
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Path relative to the output directory.
    pub file: String,
    pub sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    pub t_f: f64,
    pub steps: usize,
    pub dt: f64,
}

/// Record of one command run, stored as `<command>.manifest.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub ensemble: String,
    pub epsilon: f64,
    pub theta_nodes: usize,
    pub grid: GridInfo,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver_residual: Option<f64>,
    pub artifacts: Vec<ArtifactEntry>,
    #[serde(default)]
    pub extra: Value,
}

pub fn manifest_path(out: &Path, command: &str) -> PathBuf {
    out.join(format!("{command}.manifest.json"))
}

/// Collects the files a command writes and their hashes.
#[derive(Debug)]
pub struct ArtifactSet {
    out: PathBuf,
    entries: Vec<ArtifactEntry>,
}

impl ArtifactSet {
    pub fn new(out: &Path) -> CliResult<Self> {
        fs::create_dir_all(out)?;
        Ok(Self { out: out.to_path_buf(), entries: Vec::new() })
    }

    pub fn out(&self) -> &Path {
        &self.out
    }

    /// Writes `bytes` to `out/rel` atomically and records it.
    pub fn write(&mut self, rel: &str, bytes: &[u8], seed: Option<u64>) -> CliResult<()> {
        write_atomic(&self.out.join(rel), bytes)?;
        self.entries.push(ArtifactEntry { file: rel.to_string(), sha256: sha256_hex(bytes), seed });
        Ok(())
    }

    pub fn write_csv<F>(&mut self, rel: &str, seed: Option<u64>, fill: F) -> CliResult<()>
    where
        F: FnOnce(&mut Vec<u8>) -> ensemble_bridge::Result<()>,
    {
        let mut buf = Vec::new();
        fill(&mut buf)?;
        self.write(rel, &buf, seed)
    }

    pub fn write_json(&mut self, rel: &str, value: &impl Serialize) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
        text.push('\n');
        self.write(rel, text.as_bytes(), None)
    }

    /// Records a file that was already written atomically elsewhere.
    pub fn record(&mut self, entry: ArtifactEntry) {
        self.entries.push(entry);
    }

    pub fn finish(mut self, mut manifest: Manifest) -> CliResult<Manifest> {
        self.entries.sort_by(|a, b| a.file.cmp(&b.file));
        manifest.artifacts = self.entries;
        write_json(&manifest_path(&self.out, &manifest.command), &manifest)?;
        Ok(manifest)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// All manifests in `out`, sorted by file name.
pub fn read_manifests(out: &Path) -> CliResult<Vec<(PathBuf, Manifest)>> {
    let mut found = Vec::new();
    let Ok(entries) = fs::read_dir(out) else {
        return Ok(found);
    };
    for e in entries {
        let p = e?.path();
        if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".manifest.json")) {
            let text = fs::read_to_string(&p)?;
            let m: Manifest = serde_json::from_str(&text)
                .map_err(|err| CliError::Config(format!("unreadable manifest {}: {err}", p.display())))?;
            found.push((p, m));
        }
    }
    found.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(found)
}
