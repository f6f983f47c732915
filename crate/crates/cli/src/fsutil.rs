use std::io::Write;
use std::path::Path;

use tempfile::NamedTempFile;

use crate::error::{io_err, Result};

/// Writes `bytes` to a temporary file beside `path`, then renames it over
/// `path`. Readers see either the old file or the complete new one.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| io_err(path)(e.error))?;
    Ok(())
}

pub fn atomic_write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| {
        crate::error::CliError::Validation(format!("cannot serialize {}: {e}", path.display()))
    })?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}
