//! Seed derivation, digests and line-delimited record IO shared by every stage.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const TOOL_NAME: &str = "rollout-eval";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Mixes a global seed with string parts into a stable 64-bit seed.
///
/// Parts are length-prefixed so `["ab", "c"]` and `["a", "bc"]` differ.
pub fn derive_seed(global: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global.to_le_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(global: u64, parts: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global, parts))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn digest_file(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Provenance header written as the first line of every record file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHeader {
    pub tool: String,
    pub version: String,
    pub kind: String,
    pub seed: u64,
    /// Input name to sha256 digest, in insertion order of the caller.
    #[serde(default)]
    pub inputs: Vec<(String, String)>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl FileHeader {
    pub fn new(kind: &str, seed: u64) -> Self {
        Self {
            tool: TOOL_NAME.to_string(),
            version: TOOL_VERSION.to_string(),
            kind: kind.to_string(),
            seed,
            inputs: Vec::new(),
            config: serde_json::Value::Null,
        }
    }

    pub fn with_input(mut self, name: &str, digest: String) -> Self {
        self.inputs.push((name.to_string(), digest));
        self
    }

    pub fn with_config(mut self, config: serde_json::Value) -> Self {
        self.config = config;
        self
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: FileHeader,
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
}

impl RecordError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        RecordError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Writes an optional header line followed by one JSON record per line.
pub fn write_records<T: Serialize>(
    path: &Path,
    header: Option<&FileHeader>,
    records: &[T],
) -> Result<(), RecordError> {
    let file = File::create(path).map_err(|e| RecordError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut emit = |line: String| -> Result<(), RecordError> {
        out.write_all(line.as_bytes())
            .and_then(|_| out.write_all(b"\n"))
            .map_err(|e| RecordError::io(path, e))
    };
    if let Some(header) = header {
        emit(serde_json::to_string(&HeaderLine {
            header: header.clone(),
        })
        .expect("header serializes"))?;
    }
    for record in records {
        emit(serde_json::to_string(record).map_err(|e| RecordError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?)?;
    }
    out.flush().map_err(|e| RecordError::io(path, e))
}

/// Reads a record file, returning its header (if any) and the records.
/// Blank lines are skipped.
pub fn read_records<T: DeserializeOwned>(
    path: &Path,
) -> Result<(Option<FileHeader>, Vec<T>), RecordError> {
    let file = File::open(path).map_err(|e| RecordError::io(path, e))?;
    let mut header = None;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| RecordError::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if idx == 0 && trimmed.starts_with("{\"header\"") {
            let parsed: HeaderLine =
                serde_json::from_str(trimmed).map_err(|e| RecordError::Parse {
                    path: path.display().to_string(),
                    line: idx + 1,
                    message: e.to_string(),
                })?;
            header = Some(parsed.header);
            continue;
        }
        let record = serde_json::from_str(trimmed).map_err(|e| RecordError::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok((header, records))
}
