//! Binary embedding container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset 0   magic  b"EMB1"
//! offset 4   dim    u32
//! offset 8   count  u64
//! offset 16  count * dim f32 values, row-major
//! ```
//!
//! A sidecar `.keys` file holds one JSON string per line naming each row.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::EmbeddingVector;

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum EmbFileError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EmbFileError + '_ {
    move |source| EmbFileError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn keys_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".keys");
    PathBuf::from(p)
}

/// Writes `entries` to `path` and its key sidecar. All vectors must share
/// `dim`.
pub fn write(path: &Path, dim: usize, entries: &[(String, EmbeddingVector)]) -> Result<(), EmbFileError> {
    let bad = |reason: String| EmbFileError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if let Some((key, v)) = entries.iter().find(|(_, v)| v.dim() != dim) {
        return Err(bad(format!("entry {key:?} has dim {} (expected {dim})", v.dim())));
    }
    let dim32 = u32::try_from(dim).map_err(|_| bad("dimension exceeds u32".into()))?;

    let mut out = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut header = [0u8; HEADER_LEN];
    header[..4].copy_from_slice(MAGIC);
    header[4..8].copy_from_slice(&dim32.to_le_bytes());
    header[8..].copy_from_slice(&(entries.len() as u64).to_le_bytes());
    out.write_all(&header).map_err(io_err(path))?;
    for (_, v) in entries {
        for x in v.values() {
            out.write_all(&x.to_le_bytes()).map_err(io_err(path))?;
        }
    }
    out.flush().map_err(io_err(path))?;

    let kp = keys_path(path);
    let mut keys = BufWriter::new(File::create(&kp).map_err(io_err(&kp))?);
    for (key, _) in entries {
        let line = serde_json::to_string(key).expect("strings always serialize");
        writeln!(keys, "{line}").map_err(io_err(&kp))?;
    }
    keys.flush().map_err(io_err(&kp))
}

/// Reads a container and its sidecar back as `(key, vector)` pairs.
pub fn read(path: &Path) -> Result<(usize, Vec<(String, EmbeddingVector)>), EmbFileError> {
    let bad = |reason: String| EmbFileError::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("missing EMB1 header".into()));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| bad("header sizes overflow".into()))?;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes, found {}", bytes.len())));
    }

    let kp = keys_path(path);
    let keys: Vec<String> = BufReader::new(File::open(&kp).map_err(io_err(&kp))?)
        .lines()
        .map(|l| {
            let l = l.map_err(io_err(&kp))?;
            serde_json::from_str(&l).map_err(|e| bad(format!("bad key line: {e}")))
        })
        .collect::<Result<_, _>>()?;
    if keys.len() != count {
        return Err(bad(format!("{} keys for {count} vectors", keys.len())));
    }

    let mut entries = Vec::with_capacity(count);
    for (row, key) in bytes[HEADER_LEN..].chunks_exact(dim.max(1) * 4).zip(keys) {
        let values = row
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let v = EmbeddingVector::from_unit(values).map_err(|e| bad(format!("row {key:?}: {e}")))?;
        entries.push((key, v));
    }
    Ok((dim, entries))
}
