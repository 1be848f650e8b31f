use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Written next to every command's outputs. Only the two timestamps vary
/// between reruns with equal inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub started_at: String,
    pub finished_at: String,
    /// Output path (relative to the record) and SHA-256 of its bytes.
    pub outputs: Vec<(String, String)>,
}

pub struct RunTimer {
    command: String,
    started_at: String,
}

impl RunTimer {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.into(),
            started_at: now(),
        }
    }

    pub fn finish(self, config_hash: String, seed: u64, outputs: Vec<(String, String)>) -> RunRecord {
        RunRecord {
            command: self.command,
            config_hash,
            seed,
            code_version: CODE_VERSION.into(),
            started_at: self.started_at,
            finished_at: now(),
            outputs,
        }
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::internal(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::internal(format!("{}: {e}", path.display())))
}

/// Writes `bytes` to `dir/name` and returns the `(name, sha256)` pair for
/// the run record.
pub fn write_output(dir: &Path, name: &str, bytes: &[u8]) -> Result<(String, String), CliError> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, bytes).map_err(|e| CliError::internal(format!("{}: {e}", path.display())))?;
    Ok((name.to_string(), sha256_hex(bytes)))
}
