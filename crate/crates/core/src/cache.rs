//! On-disk stage cache.
//!
//! A namespace is `(dataset, video, stage, fingerprint)` and lives at
//! `{root}/{dataset}/{stage}/{fingerprint}/{video}.*`. Records are appended
//! one JSON object per line; embeddings go to an `EMB1` container. A
//! `.done` marker is written last, so a namespace without one is treated as
//! absent and rebuilt from scratch.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::config::Stage;
use crate::embfile::{self, EmbFileError};
use crate::model::EmbeddingVector;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt cache record {path}:{line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Embeddings(#[from] EmbFileError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CacheError + '_ {
    move |source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// File-name-safe form of an identifier (bytes outside `[A-Za-z0-9._-]`
/// are percent-encoded).
pub fn escape_component(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for b in id.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    if out.starts_with('.') {
        out.replace_range(0..1, "%2E");
    }
    out
}

#[derive(Debug, Clone)]
pub struct StageCache {
    root: PathBuf,
    force: bool,
}

impl StageCache {
    /// With `force`, completed namespaces are ignored and overwritten.
    pub fn new(root: impl Into<PathBuf>, force: bool) -> Self {
        Self {
            root: root.into(),
            force,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn namespace(&self, dataset: &str, video_id: &str, stage: Stage, fingerprint: &str) -> Namespace {
        Namespace {
            dir: self
                .root
                .join(escape_component(dataset))
                .join(stage.name())
                .join(escape_component(fingerprint)),
            stem: escape_component(video_id),
            force: self.force,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Namespace {
    dir: PathBuf,
    stem: String,
    force: bool,
}

impl Namespace {
    fn file(&self, ext: &str) -> PathBuf {
        self.dir.join(format!("{}.{ext}", self.stem))
    }

    pub fn records_path(&self) -> PathBuf {
        self.file("jsonl")
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.file("emb")
    }

    pub fn done_path(&self) -> PathBuf {
        self.file("done")
    }

    pub fn is_complete(&self) -> bool {
        self.done_path().exists()
    }

    /// Whether a completed namespace should be reused.
    pub fn reusable(&self) -> bool {
        !self.force && self.is_complete()
    }

    fn begin(&self) -> Result<(), CacheError> {
        fs::create_dir_all(&self.dir).map_err(io(&self.dir))?;
        let done = self.done_path();
        if done.exists() {
            fs::remove_file(&done).map_err(io(&done))?;
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), CacheError> {
        let done = self.done_path();
        File::create(&done).map_err(io(&done))?;
        Ok(())
    }

    /// Reads records of a reusable namespace; `None` means recompute.
    pub fn load<T: DeserializeOwned>(&self) -> Result<Option<Vec<T>>, CacheError> {
        if !self.reusable() {
            return Ok(None);
        }
        let path = self.records_path();
        let reader = BufReader::new(File::open(&path).map_err(io(&path))?);
        let mut out = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(io(&path))?;
            let record = serde_json::from_str(&line).map_err(|e| CacheError::Corrupt {
                path: path.clone(),
                line: n + 1,
                message: e.to_string(),
            })?;
            out.push(record);
        }
        Ok(Some(out))
    }

    /// Replaces any partial content, appends every record, then marks the
    /// namespace complete.
    pub fn store<T: Serialize>(&self, records: &[T]) -> Result<(), CacheError> {
        self.begin()?;
        let path = self.records_path();
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(io(&path))?;
        let mut w = BufWriter::new(file);
        for r in records {
            serde_json::to_writer(&mut w, r).map_err(|e| CacheError::Corrupt {
                path: path.clone(),
                line: 0,
                message: e.to_string(),
            })?;
            w.write_all(b"\n").map_err(io(&path))?;
        }
        w.flush().map_err(io(&path))?;
        self.finish()
    }

    pub fn load_embeddings(&self) -> Result<Option<Vec<(String, EmbeddingVector)>>, CacheError> {
        if !self.reusable() {
            return Ok(None);
        }
        Ok(Some(embfile::read(&self.embeddings_path())?.1))
    }

    pub fn store_embeddings(&self, dim: usize, entries: &[(String, EmbeddingVector)]) -> Result<(), CacheError> {
        self.begin()?;
        embfile::write(&self.embeddings_path(), dim, entries)?;
        self.finish()
    }
}
