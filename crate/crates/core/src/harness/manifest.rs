//! Run manifest: per-stage artifact paths with content hashes, written
//! atomically so a partially executed pipeline can always be resumed.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::time::SystemTime;

use serde::{Deserialize, Serialize};

use super::HarnessError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageEntry {
    /// Artifact path (relative to the run directory) to sha256 hex digest.
    pub artifacts: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub config_hash: String,
    pub stages: BTreeMap<String, StageEntry>,
}

impl RunManifest {
    pub fn new(config_hash: &str) -> Self {
        RunManifest {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            stages: BTreeMap::new(),
        }
    }

    /// Loads the existing manifest or starts a fresh one. A mismatching
    /// config hash means the directory holds another experiment's
    /// artifacts; that is rejected rather than silently mixed.
    pub fn load_or_new(out_dir: &Path, config_hash: &str) -> Result<Self, HarnessError> {
        let path = out_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(RunManifest::new(config_hash));
        }
        let text = std::fs::read_to_string(&path)
            .map_err(|e| HarnessError::Data(format!("cannot read manifest: {e}")))?;
        let manifest: RunManifest = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Data(format!("malformed manifest: {e}")))?;
        if manifest.config_hash != config_hash {
            return Err(HarnessError::Data(format!(
                "out dir {} was produced with config hash {}, current config hashes to {}",
                out_dir.display(),
                manifest.config_hash,
                config_hash
            )));
        }
        Ok(manifest)
    }

    /// Records a completed stage and persists the manifest via
    /// write-then-rename.
    pub fn record_stage(
        &mut self,
        out_dir: &Path,
        stage: &str,
        artifact_paths: &[&Path],
        seed: u64,
        started: SystemTime,
    ) -> Result<(), HarnessError> {
        let mut artifacts = BTreeMap::new();
        for p in artifact_paths {
            let rel = p
                .strip_prefix(out_dir)
                .map(|r| r.display().to_string())
                .unwrap_or_else(|_| p.display().to_string());
            artifacts.insert(rel, sha256_file(p)?);
        }
        let wall_clock_secs = started.elapsed().map(|d| d.as_secs_f64()).unwrap_or(0.0);
        self.stages.insert(
            stage.to_string(),
            StageEntry {
                artifacts,
                wall_clock_secs,
                seed,
            },
        );
        self.save(out_dir)
    }

    pub fn save(&self, out_dir: &Path) -> Result<(), HarnessError> {
        let path = out_dir.join(MANIFEST_FILE);
        let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| HarnessError::Data(format!("manifest serialization: {e}")))?;
        std::fs::write(&tmp, text).map_err(|e| HarnessError::Data(e.to_string()))?;
        std::fs::rename(&tmp, &path).map_err(|e| HarnessError::Data(e.to_string()))?;
        Ok(())
    }

    pub fn stage(&self, name: &str) -> Option<&StageEntry> {
        self.stages.get(name)
    }
}

/// Streaming sha256 of a file, hex encoded.
pub fn sha256_file(path: &Path) -> Result<String, HarnessError> {
    use sha2::{Digest, Sha256};
    let mut f = std::fs::File::open(path)
        .map_err(|e| HarnessError::Data(format!("cannot hash {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = f
            .read(&mut buf)
            .map_err(|e| HarnessError::Data(e.to_string()))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}
