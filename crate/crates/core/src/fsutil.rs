//! Small filesystem helpers shared by the writers.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = temp_sibling(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Replaces directory `dst` with `staged` (a fully written sibling directory).
pub fn promote_dir(staged: &Path, dst: &Path) -> Result<()> {
    if dst.exists() {
        let old = temp_sibling(&dst.with_extension("old"));
        fs::rename(dst, &old).map_err(|e| Error::io(dst, e))?;
        fs::rename(staged, dst).map_err(|e| Error::io(dst, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))
    } else {
        if let Some(parent) = dst.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::rename(staged, dst).map_err(|e| Error::io(dst, e))
    }
}

/// A fresh staging directory next to `dst`.
pub fn staging_dir(dst: &Path) -> Result<PathBuf> {
    let staged = temp_sibling(dst);
    if staged.exists() {
        fs::remove_dir_all(&staged).map_err(|e| Error::io(&staged, e))?;
    }
    fs::create_dir_all(&staged).map_err(|e| Error::io(&staged, e))?;
    Ok(staged)
}
