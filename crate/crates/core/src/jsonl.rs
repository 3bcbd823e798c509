//! Append-only JSON-lines files.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {source}")]
    Decode {
        path: PathBuf,
        line: usize,
        source: serde_json::Error,
    },
    #[error("encode: {0}")]
    Encode(#[from] serde_json::Error),
}

/// Parses JSON-lines text, skipping blank lines. `origin` is only used in
/// error messages.
pub fn parse_lines<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<Vec<T>, JsonlError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| JsonlError::Decode {
                path: origin.to_path_buf(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

/// Reads every record of a JSON-lines file; a missing file reads as empty.
pub fn read_all<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => {
            return Err(JsonlError::Io {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| JsonlError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| JsonlError::Decode {
            path: path.to_path_buf(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

/// Atomically replaces `path` with one line per record.
pub fn write_all<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<usize, JsonlError> {
    let io_err = |source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    let mut buf = Vec::new();
    let mut n = 0;
    for r in records {
        serde_json::to_writer(&mut buf, &r)?;
        buf.push(b'\n');
        n += 1;
    }
    fs::write(&tmp, &buf).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)?;
    Ok(n)
}

/// An append-only log file guarded by a mutex so concurrent appenders never
/// interleave partial lines.
#[derive(Debug)]
pub struct AppendLog {
    path: Option<PathBuf>,
    lock: Mutex<()>,
}

impl AppendLog {
    pub fn new(path: Option<PathBuf>) -> Self {
        Self {
            path,
            lock: Mutex::new(()),
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append<T: Serialize>(&self, record: &T) -> Result<(), JsonlError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        let _guard = self.lock.lock();
        let io_err = |source| JsonlError::Io {
            path: path.clone(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        f.write_all(&line).map_err(io_err)
    }

    pub fn read_all<T: DeserializeOwned>(&self) -> Result<Vec<T>, JsonlError> {
        match &self.path {
            Some(p) => read_all(p),
            None => Ok(Vec::new()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_then_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let log = AppendLog::new(Some(dir.path().join("x.jsonl")));
        log.append(&serde_json::json!({"a": 1})).unwrap();
        log.append(&serde_json::json!({"a": 2})).unwrap();
        let rows: Vec<serde_json::Value> = log.read_all().unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1]["a"], 2);
    }

    #[test]
    fn missing_file_reads_empty_and_bad_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("none.jsonl");
        assert!(read_all::<serde_json::Value>(&p).unwrap().is_empty());
        fs::write(&p, "{\"a\":1}\n\nnot json\n").unwrap();
        match read_all::<serde_json::Value>(&p) {
            Err(JsonlError::Decode { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
