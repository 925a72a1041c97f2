use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use tsm_core::Error;

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct ReportEnvelope {
    pub tool_version: &'static str,
    pub command: &'static str,
    pub inputs: Vec<InputDigest>,
    pub payload: Value,
}

impl ReportEnvelope {
    pub fn new(command: &'static str, inputs: Inputs, payload: impl Serialize) -> Result<Self, CliError> {
        Ok(ReportEnvelope {
            tool_version: env!("CARGO_PKG_VERSION"),
            command,
            inputs: inputs.0,
            payload: serde_json::to_value(payload).map_err(|e| CliError::Internal(e.to_string()))?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Files a command consumed, with their digests, in reading order.
#[derive(Debug, Default)]
pub struct Inputs(Vec<InputDigest>);

impl Inputs {
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        self.0.push(InputDigest {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    /// Records every regular file of a directory in name order.
    pub fn read_dir(&mut self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        let files = list_files(dir)?;
        for f in &files {
            self.read(f)?;
        }
        Ok(files)
    }
}

pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rd = fs::read_dir(dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| CliError::Usage(e.to_string()))?.path();
        if p.is_file() {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or unreadable inputs: exit 2.
    Usage(String),
    /// A checked property does not hold: exit 1.
    Invariant(String),
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Invariant(_) | CliError::Internal(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Invariant(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Invariant(m) => CliError::Invariant(m),
            other => CliError::Usage(other.to_string()),
        }
    }
}

pub fn write_out(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}
