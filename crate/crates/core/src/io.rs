//! Line-delimited JSON reading and atomic file output.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Provenance written as the first line of every JSONL file the pipeline
/// produces. Readers skip it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputMeta {
    pub command: String,
    pub seed: u64,
    pub format_version: u32,
}

impl OutputMeta {
    pub fn new(command: impl Into<String>, seed: u64) -> Self {
        Self {
            command: command.into(),
            seed,
            format_version: crate::FORMAT_VERSION,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    #[serde(rename = "_meta")]
    meta: OutputMeta,
}

/// Reads one record per non-blank line, returning each with its 1-based line
/// number. A leading `{"_meta": ...}` line is skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if idx == 0 && trimmed.starts_with("{\"_meta\"") {
            continue;
        }
        let value = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push((idx + 1, value));
    }
    Ok(out)
}

/// Reads the provenance header of a JSONL file, if it has one.
pub fn read_meta(path: &Path) -> Result<Option<OutputMeta>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str::<MetaLine>(first.trim())
        .ok()
        .map(|m| m.meta))
}

/// Serializes records as JSONL, optionally preceded by a provenance line.
pub fn to_jsonl<T: Serialize>(records: &[T], meta: Option<&OutputMeta>) -> Result<String> {
    let mut buf = String::new();
    if let Some(meta) = meta {
        buf.push_str(&serde_json::to_string(&MetaLine { meta: meta.clone() })?);
        buf.push('\n');
    }
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    Ok(buf)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T], meta: Option<&OutputMeta>) -> Result<()> {
    write_atomic(path, to_jsonl(records, meta)?.as_bytes())
}

/// Writes to a sibling temp file and renames it over `path`, so readers never
/// observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_header_is_skipped_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        let meta = OutputMeta::new("synth --seed 3", 3);
        write_jsonl(&path, &[1u32, 2, 3], Some(&meta)).unwrap();
        let back: Vec<(usize, u32)> = read_jsonl(&path).unwrap();
        assert_eq!(back, vec![(2, 1), (3, 2), (4, 3)]);
        assert_eq!(read_meta(&path).unwrap(), Some(meta));
        assert!(!dir.path().join("x.jsonl.tmp").exists());
    }

    #[test]
    fn bad_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        fs::write(&path, "1\n\n{oops}\n").unwrap();
        let err = read_jsonl::<u32>(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }
}
