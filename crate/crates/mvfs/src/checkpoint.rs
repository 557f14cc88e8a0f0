//! Checkpoint container and atomic file writes.

use std::fs;
use std::path::Path;

use mvfs_core::training::Checkpoint;
use serde::Serialize;

use crate::error::{Error, Result};

/// First line of every checkpoint file.
pub const MAGIC: &str = "MVFSCKPT1";

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::write(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::write(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Runtime(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.line(), e))
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let body = serde_json::to_string(ckpt).map_err(|e| Error::Runtime(e.to_string()))?;
    write_atomic(path, format!("{MAGIC}\n{body}\n").as_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let body = text
        .strip_prefix(MAGIC)
        .and_then(|rest| rest.strip_prefix('\n'))
        .ok_or_else(|| Error::malformed(path, 1, format!("not a checkpoint (expected `{MAGIC}` header)")))?;
    let mut ckpt: Checkpoint = serde_json::from_str(body).map_err(|e| Error::malformed(path, e.line() + 1, e))?;
    if let Some(v) = ckpt.vocabulary.as_mut() {
        v.rebuild_lookup();
    }
    Ok(ckpt)
}
