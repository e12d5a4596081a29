//! Run manifests: what a command read, what it wrote, and with which settings.

use std::path::Path;
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::io::write_atomic;
use crate::{Error, Result};

pub const TOOL_NAME: &str = "gearqat";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileRecord {
    pub fn of_bytes(path: &Path, bytes: &[u8]) -> Self {
        Self { path: path.display().to_string(), sha256: hex::encode(Sha256::digest(bytes)), bytes: bytes.len() as u64 }
    }

    pub fn of_file(path: &Path) -> Result<Self> {
        Ok(Self::of_bytes(path, &std::fs::read(path)?))
    }
}

/// Written beside every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    /// Parsed command-line arguments.
    pub arguments: serde_json::Value,
    /// Module configuration after defaults and checkpoint settings were applied.
    pub resolved: serde_json::Value,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub started_at: String,
    pub finished_at: String,
}

pub fn timestamp(t: SystemTime) -> String {
    humantime::format_rfc3339_seconds(t).to_string()
}

fn compare(kind: &str, recorded: &[FileRecord], current: &[FileRecord]) -> Result<()> {
    if recorded.len() != current.len() {
        return Err(Error::Verification(format!(
            "manifest lists {} {kind} files, replay produced {}",
            recorded.len(),
            current.len()
        )));
    }
    for (r, c) in recorded.iter().zip(current) {
        if r.path != c.path {
            return Err(Error::Verification(format!("{kind} file {} recorded, replay has {}", r.path, c.path)));
        }
        if r.sha256 != c.sha256 {
            return Err(Error::Verification(format!("{kind} {} digest changed", r.path)));
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Checks a replay's input and output digests against this manifest.
    pub fn verify(&self, inputs: &[FileRecord], outputs: &[FileRecord]) -> Result<()> {
        compare("input", &self.inputs, inputs)?;
        compare("output", &self.outputs, outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(inputs: Vec<FileRecord>, outputs: Vec<FileRecord>) -> RunManifest {
        RunManifest {
            tool: TOOL_NAME.into(),
            version: "0".into(),
            command: "select".into(),
            argv: vec![],
            seed: 1,
            arguments: serde_json::Value::Null,
            resolved: serde_json::Value::Null,
            inputs,
            outputs,
            started_at: timestamp(SystemTime::UNIX_EPOCH),
            finished_at: timestamp(SystemTime::UNIX_EPOCH),
        }
    }

    #[test]
    fn verify_detects_changes() {
        let a = FileRecord::of_bytes(Path::new("a.csv"), b"1,2");
        let b = FileRecord::of_bytes(Path::new("b.json"), b"{}");
        let m = manifest(vec![a.clone()], vec![b.clone()]);
        assert!(m.verify(&[a.clone()], &[b.clone()]).is_ok());
        let a2 = FileRecord::of_bytes(Path::new("a.csv"), b"1,3");
        assert!(matches!(m.verify(&[a2], &[b.clone()]), Err(Error::Verification(_))));
        assert!(matches!(m.verify(&[a], &[]), Err(Error::Verification(_))));
    }

    #[test]
    fn timestamps_are_rfc3339() {
        assert_eq!(timestamp(SystemTime::UNIX_EPOCH), "1970-01-01T00:00:00Z");
    }
}
