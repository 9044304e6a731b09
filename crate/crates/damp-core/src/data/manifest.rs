//! Plain-text dataset manifests: one `key = value` per line, `#` comments.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{DampError, Result};

pub fn write_manifest<P: AsRef<Path>>(path: P, entries: &BTreeMap<String, String>) -> Result<()> {
    let mut out = String::new();
    for (k, v) in entries {
        out.push_str(&format!("{k} = {v}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest<P: AsRef<Path>>(path: P) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            DampError::Format(format!("manifest line {}: missing '='", lineno + 1))
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.manifest");
        let mut entries = BTreeMap::new();
        entries.insert("kind".to_string(), "blobs".to_string());
        entries.insert("class_count".to_string(), "10".to_string());
        entries.insert("normalization".to_string(), "unit-interval".to_string());
        write_manifest(&path, &entries).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);
    }

    #[test]
    fn malformed_line_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.manifest");
        fs::write(&path, "kind blobs\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(DampError::Format(_))));
    }
}
