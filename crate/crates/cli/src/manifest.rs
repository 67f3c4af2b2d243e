//! Run manifests: the resolved config plus content hashes of every input,
//! written next to a command's outputs. A manifest can be passed back as
//! `--config` to repeat the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: PathBuf,
    /// SHA-256 over `blob <len>\0<content>`, as git hashes blobs.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestInfo {
    pub command: String,
    pub version: String,
    pub adl_enabled: bool,
    pub inputs: Vec<InputHash>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest: ManifestInfo,
    #[serde(flatten)]
    pub config: RunConfig,
}

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(command: &str, config: &RunConfig, inputs: &[&Path]) -> Result<Self, CliError> {
        let inputs = inputs
            .iter()
            .map(|p| {
                let bytes = std::fs::read(p).map_err(CliError::io(*p))?;
                Ok(InputHash { path: p.to_path_buf(), sha256: blob_hash(&bytes) })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(Manifest {
            manifest: ManifestInfo {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION").to_string(),
                adl_enabled: config.adl().is_some(),
                inputs,
            },
            config: config.clone(),
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        toml::from_str(&text).map_err(|e| CliError::Format { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_toml()).map_err(CliError::io(path))
    }
}
