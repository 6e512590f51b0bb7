use std::path::Path;

use jamba_core::model::checkpoint;

use crate::error::Result;

/// Atomic write that also creates missing parent directories.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(checkpoint::write_atomic(path, bytes)?)
}
