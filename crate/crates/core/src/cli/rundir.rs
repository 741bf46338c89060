use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKSUM_FILE: &str = "checksums.sha256";

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn files_under(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            files_under(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != CHECKSUM_FILE) {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// Parses `hash  relative/path` lines.
pub fn read_checksums(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(CHECKSUM_FILE);
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match l.split_once("  ") {
            Some((h, f)) => Ok((f.to_string(), h.to_string())),
            None => Err(Error::Invalid(format!("{}: malformed line {l:?}", path.display()))),
        })
        .collect()
}

/// Rewrites the checksum file to cover every file now in `dir`.
pub fn write_checksums(dir: &Path) -> Result<()> {
    let mut files = Vec::new();
    files_under(dir, dir, &mut files)?;
    files.sort();
    let mut text = String::new();
    for f in files {
        let name = f.to_string_lossy().replace('\\', "/");
        text += &format!("{}  {name}\n", sha256_hex(&dir.join(&f))?);
    }
    let path = dir.join(CHECKSUM_FILE);
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Every `required` file (relative to `dir`) exists and matches its line.
pub fn verify_artifacts(dir: &Path, required: &[PathBuf]) -> Result<()> {
    let sums = read_checksums(dir)?;
    for rel in required {
        let name = rel.to_string_lossy().replace('\\', "/");
        let full = dir.join(rel);
        if !full.exists() {
            return Err(Error::Invalid(format!("missing artifact {}", full.display())));
        }
        match sums.get(&name) {
            Some(h) if *h == sha256_hex(&full)? => {}
            Some(_) => return Err(Error::Invalid(format!("checksum mismatch for {}", full.display()))),
            None => return Err(Error::Invalid(format!("no checksum line for {name}"))),
        }
    }
    Ok(())
}
