//! Run manifests: a JSON record of what a run consumed and produced, with
//! content fingerprints. The manifest is written last, so its presence
//! marks a complete run, and later commands refuse artifacts whose
//! fingerprints no longer match.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}: {kind}")]
    Io { path: String, kind: std::io::ErrorKind },
    #[error("{path}: {reason}")]
    Format { path: String, reason: String },
    #[error(
        "{artifact} does not match the manifest fingerprint (expected {expected}, \
         found {found}); the run directory was modified after training"
    )]
    FingerprintMismatch { artifact: String, expected: String, found: String },
    #[error("{0} is not recorded in the manifest")]
    UnknownArtifact(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ManifestError + '_ {
    move |e| ManifestError::Io { path: path.display().to_string(), kind: e.kind() }
}

/// SHA-256 of a file's bytes, hex-encoded.
pub fn fingerprint(path: &Path) -> Result<String, ManifestError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand that produced this run.
    pub command: String,
    /// Canonical text of the resolved configuration.
    pub spec_text: String,
    /// Data directory the run read from.
    pub data_dir: String,
    /// Fingerprints of the input files, keyed by file name.
    pub inputs: BTreeMap<String, String>,
    /// Fingerprints of the produced artifacts, keyed by file name
    /// relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
    /// Step whose checkpoint was kept.
    pub kept_step: u64,
    /// Dev metric of the kept checkpoint, if dev evaluation ran.
    pub kept_metric: Option<f64>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn now_unix() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    /// Serializes to `dir/manifest.json`. Call only after every artifact
    /// is fully written.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, ManifestError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text).map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<RunManifest, ManifestError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| ManifestError::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    /// Verifies that the named artifact still has the recorded
    /// fingerprint, returning its path.
    pub fn verified_artifact(&self, dir: &Path, name: &str) -> Result<PathBuf, ManifestError> {
        let expected = self
            .artifacts
            .get(name)
            .ok_or_else(|| ManifestError::UnknownArtifact(name.to_string()))?;
        let path = dir.join(name);
        let found = fingerprint(&path)?;
        if &found != expected {
            return Err(ManifestError::FingerprintMismatch {
                artifact: name.to_string(),
                expected: expected.clone(),
                found,
            });
        }
        Ok(path)
    }
}
