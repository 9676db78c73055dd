//! Run manifests: the resolved config of one command invocation together with
//! content hashes of what it read and wrote.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{format, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

/// A file read or written by a run. Paths of outputs are relative to the
/// manifest's directory; input paths are stored as given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileRef {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
    /// For outputs appended to a shared CSV, the data row this run wrote;
    /// `sha256` then hashes that row alone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    /// Every setting of the run, defaults included.
    pub config: serde_json::Value,
    /// Content hash of the dataset the run consumed, if any.
    pub dataset_sha256: Option<String>,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn output(&self, role: &str) -> Option<&FileRef> {
        self.outputs.iter().find(|f| f.role == role)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| format(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(lsp_core::Error::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<RunManifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| format(format!("manifest {}: {e}", path.display())))
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| format(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_bytes(&bytes))
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}
