//! Self-describing JSON checkpoint container shared by the trainable models.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "pathosynth-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed checkpoint: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("{path}: expected a {expected} checkpoint, found {found}")]
    Mismatch { path: PathBuf, expected: String, found: String },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint<P> {
    pub format: String,
    pub version: u32,
    /// What the payload is, e.g. `"synthesis"` or `"classifier"`.
    pub kind: String,
    /// `"f32"` or `"f64"`.
    pub scalar: String,
    pub seed: u64,
    pub payload: P,
}

impl<P> Checkpoint<P> {
    pub fn new(kind: &str, scalar: &str, seed: u64, payload: P) -> Self {
        Self { format: FORMAT.into(), version: VERSION, kind: kind.into(), scalar: scalar.into(), seed, payload }
    }
}

pub fn save_checkpoint<P: Serialize>(path: &Path, ckpt: &Checkpoint<P>) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let file = File::create(path).map_err(io)?;
    serde_json::to_writer(BufWriter::new(file), ckpt)
        .map_err(|source| CheckpointError::Parse { path: path.to_path_buf(), source })
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    scalar: String,
}

/// Loads a checkpoint and checks its format, kind and scalar type.
pub fn load_checkpoint<P: DeserializeOwned>(
    path: &Path,
    kind: &str,
    scalar: &str,
) -> Result<Checkpoint<P>, CheckpointError> {
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let parse = |source| CheckpointError::Parse { path: path.to_path_buf(), source };
    let text = std::fs::read_to_string(path).map_err(io)?;
    let header: Header = serde_json::from_str(&text).map_err(parse)?;
    let mismatch = |expected: String, found: String| CheckpointError::Mismatch {
        path: path.to_path_buf(),
        expected,
        found,
    };
    if header.format != FORMAT || header.version != VERSION {
        return Err(mismatch(format!("{FORMAT} v{VERSION}"), format!("{} v{}", header.format, header.version)));
    }
    if header.kind != kind || header.scalar != scalar {
        return Err(mismatch(format!("{kind}/{scalar}"), format!("{}/{}", header.kind, header.scalar)));
    }
    serde_json::from_str(&text).map_err(parse)
}
