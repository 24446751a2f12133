//! One-JSON-object-per-line files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Parses every nonblank line of `path`, returning `(line_number, record)` pairs.
pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    read_lines(path)?
        .into_iter()
        .map(|(no, line)| parse_line(path, no, &line).map(|r| (no, r)))
        .collect()
}

pub(crate) fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

pub(crate) fn parse_line<T: DeserializeOwned>(path: &Path, line: usize, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        line,
        message: e.to_string(),
    })
}

pub fn write<'a, T: Serialize + 'a>(path: &Path, records: impl IntoIterator<Item = &'a T>) -> Result<()> {
    write_with_header::<T, ()>(path, None, records)
}

pub(crate) fn write_with_header<'a, T: Serialize + 'a, H: Serialize>(
    path: &Path,
    header: Option<&H>,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |v: String| writeln!(w, "{v}").map_err(|e| Error::io(path, e));
    if let Some(h) = header {
        emit(serde_json::to_string(h).expect("header serializes"))?;
    }
    for r in records {
        emit(serde_json::to_string(r).expect("record serializes"))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
