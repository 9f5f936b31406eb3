//! Run manifests: everything needed to repeat a command exactly.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use spex_core::{Error, Result};

use crate::config::Config;

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CommandKind {
    Simulate,
    Fit,
    Predict,
    Evaluate,
}

/// Command-line inputs beyond the configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunArgs {
    pub data: Option<PathBuf>,
    pub samples: Option<PathBuf>,
    pub sites: Option<PathBuf>,
    pub levels: Option<Vec<f64>>,
    pub resume: Option<PathBuf>,
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: CommandKind,
    pub version: String,
    pub seed: Option<u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub args: RunArgs,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub config: Config,
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(FileDigest { path: path.to_path_buf(), sha256: sha256_hex(&bytes) })
}

impl RunManifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("<manifest>", e.message().trim().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<manifest>", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join(MANIFEST_FILE), self.to_toml())?;
        Ok(())
    }

    /// Check that every recorded input still has its recorded digest.
    pub fn verify_inputs(&self) -> Result<()> {
        for f in &self.inputs {
            let now = digest_file(&f.path)?;
            if now.sha256 != f.sha256 {
                return Err(Error::Data(format!("input {} changed since the recorded run", f.path.display())));
            }
        }
        Ok(())
    }
}
