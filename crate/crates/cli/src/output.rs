use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use xsrc::fsutil::write_atomic;
use xsrc::{Error, Result};

/// Writes `bytes` atomically. An existing file with the same content is left
/// alone; one with different content is replaced only with `force`.
pub fn write_output(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if let Ok(existing) = std::fs::read(path) {
        if existing == bytes {
            return Ok(());
        }
        if !force {
            return Err(conflict(path));
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
        }
    }
    write_atomic(path, bytes)
}

/// Writes a group of files, checking every target for conflicts first so a
/// refused overwrite leaves nothing half-written.
pub fn write_outputs(outputs: &[(PathBuf, Vec<u8>)], force: bool) -> Result<()> {
    if !force {
        for (path, bytes) in outputs {
            if let Ok(existing) = std::fs::read(path) {
                if &existing != bytes {
                    return Err(conflict(path));
                }
            }
        }
    }
    for (path, bytes) in outputs {
        write_output(path, bytes, force)?;
    }
    Ok(())
}

fn conflict(path: &Path) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            "file exists with different content; pass --force to overwrite",
        ),
    }
}

/// Builds a CSV document from a header and rows of already formatted cells.
pub fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv write");
    for row in rows {
        w.write_record(&row).expect("in-memory csv write");
    }
    w.into_inner().expect("in-memory csv flush")
}

/// One JSON object per line on stderr.
pub fn log(event: &str, fields: Value) {
    let mut obj = json!({ "event": event });
    if let (Some(map), Value::Object(extra)) = (obj.as_object_mut(), fields) {
        map.extend(extra);
    }
    eprintln!("{obj}");
}

pub fn fmt(v: f64) -> String {
    format!("{v}")
}
