//! Image-text caption cleaning.
//!
//! Every sampled frame's raw caption is replaced by the caption, drawn from
//! the pool of all captions of the same video, whose text embedding has the
//! largest dot product with the frame's image embedding.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::backends::{BackendError, TextEncoder};
use crate::model::{CaptionRecord, EmbeddingVector, SampledSequence};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CleaningError {
    #[error("caption pool for `{0}` is empty")]
    EmptyPool(String),
    #[error("caption pool mixes videos `{0}` and `{1}`")]
    MixedVideos(String, String),
    #[error("embedding dimension {found} does not match pool dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{frames} sampled frames but {embeddings} image embedding slots")]
    MisalignedInputs { frames: usize, embeddings: usize },
}

/// Which captioner sources feed the pool.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub enum PoolingMode {
    /// Captions of every source.
    #[default]
    Ensemble,
    /// Captions of one source only.
    Single(String),
}

impl PoolingMode {
    pub fn admits(&self, source_id: &str) -> bool {
        match self {
            PoolingMode::Ensemble => true,
            PoolingMode::Single(s) => s == source_id,
        }
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolingMode::Ensemble => f.write_str("ensemble"),
            PoolingMode::Single(s) => write!(f, "single:{s}"),
        }
    }
}

impl FromStr for PoolingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ensemble" => Ok(PoolingMode::Ensemble),
            _ => match s.strip_prefix("single:") {
                Some(src) if !src.is_empty() => Ok(PoolingMode::Single(src.to_string())),
                _ => Err(format!("invalid pooling mode `{s}` (expected ensemble or single:SOURCE)")),
            },
        }
    }
}

impl Serialize for PoolingMode {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PoolingMode {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        String::deserialize(deserializer)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub caption: CaptionRecord,
    /// Shared between entries with identical text.
    pub embedding: Arc<EmbeddingVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionPool {
    video_id: String,
    dim: usize,
    entries: Vec<PoolEntry>,
}

/// Captions whose text could not be embedded, and why.
pub type EmbedFailures = Vec<(CaptionRecord, BackendError)>;

impl CaptionPool {
    /// Assembles a pool from captions and a text-to-embedding lookup.
    /// Captions the lookup cannot resolve are left out.
    pub fn assemble(
        video_id: &str,
        captions: Vec<CaptionRecord>,
        lookup: impl Fn(&str) -> Option<Arc<EmbeddingVector>>,
    ) -> Result<Self, CleaningError> {
        let mut entries = Vec::with_capacity(captions.len());
        for caption in captions {
            if caption.video_id != video_id {
                return Err(CleaningError::MixedVideos(video_id.to_string(), caption.video_id));
            }
            if let Some(embedding) = lookup(&caption.text) {
                entries.push(PoolEntry { caption, embedding });
            }
        }
        Self::from_entries(video_id, entries)
    }

    pub fn from_entries(video_id: &str, entries: Vec<PoolEntry>) -> Result<Self, CleaningError> {
        let first = entries
            .first()
            .ok_or_else(|| CleaningError::EmptyPool(video_id.to_string()))?;
        let dim = first.embedding.dim();
        for e in &entries {
            if e.embedding.dim() != dim {
                return Err(CleaningError::DimensionMismatch {
                    expected: dim,
                    found: e.embedding.dim(),
                });
            }
            if e.caption.video_id != video_id {
                return Err(CleaningError::MixedVideos(
                    video_id.to_string(),
                    e.caption.video_id.clone(),
                ));
            }
        }
        Ok(Self {
            video_id: video_id.to_string(),
            dim,
            entries,
        })
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The sub-pool holding only the captions chosen in `cleaned`.
    pub fn restricted_to(&self, cleaned: &CleanedCaptions) -> Result<Self, CleaningError> {
        let chosen: Vec<&CaptionRecord> = cleaned.entries.iter().map(|e| &e.caption).collect();
        let entries = self
            .entries
            .iter()
            .filter(|e| chosen.contains(&&e.caption))
            .cloned()
            .collect();
        Self::from_entries(&self.video_id, entries)
    }

    /// Best pool entry for `query`: highest dot product, then lower frame
    /// index, then source id, then text.
    pub fn best_match(&self, query: &EmbeddingVector) -> Result<(&PoolEntry, f64), CleaningError> {
        if query.dim() != self.dim {
            return Err(CleaningError::DimensionMismatch {
                expected: self.dim,
                found: query.dim(),
            });
        }
        let mut best: Option<(&PoolEntry, f64)> = None;
        for entry in &self.entries {
            let sim = query.dot(&entry.embedding);
            let better = match best {
                None => true,
                Some((cur, cur_sim)) => match sim.partial_cmp(&cur_sim).unwrap_or(Ordering::Equal) {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => content_key(&entry.caption) < content_key(&cur.caption),
                },
            };
            if better {
                best = Some((entry, sim));
            }
        }
        Ok(best.expect("pool is never empty"))
    }

    /// This frame's own captions, in (source, text) order.
    fn own_captions(&self, frame_index: usize) -> impl Iterator<Item = &PoolEntry> {
        let mut own: Vec<&PoolEntry> = self
            .entries
            .iter()
            .filter(|e| e.caption.frame_index == frame_index)
            .collect();
        own.sort_by(|a, b| content_key(&a.caption).cmp(&content_key(&b.caption)));
        own.into_iter()
    }

    /// Entry of the temporally nearest frame (earlier wins ties).
    fn nearest_caption(&self, frame_index: usize) -> &PoolEntry {
        self.entries
            .iter()
            .min_by(|a, b| {
                let key = |e: &PoolEntry| {
                    let f = e.caption.frame_index;
                    (f.abs_diff(frame_index), f > frame_index)
                };
                key(a)
                    .cmp(&key(b))
                    .then_with(|| content_key(&a.caption).cmp(&content_key(&b.caption)))
            })
            .expect("pool is never empty")
    }
}

fn content_key(c: &CaptionRecord) -> (usize, &str, &str) {
    (c.frame_index, c.source_id.as_str(), c.text.as_str())
}

/// Result of [`build_pool`]: the pool and the captions that could not be
/// embedded.
#[derive(Debug)]
pub struct PoolBuild {
    pub pool: CaptionPool,
    pub failures: EmbedFailures,
}

/// Embeds every distinct caption text once and assembles the pool.
pub fn build_pool(
    video_id: &str,
    captions: Vec<CaptionRecord>,
    encoder: &dyn TextEncoder,
) -> Result<PoolBuild, CleaningError> {
    if captions.is_empty() {
        return Err(CleaningError::EmptyPool(video_id.to_string()));
    }
    let mut embedded: HashMap<String, Result<Arc<EmbeddingVector>, BackendError>> = HashMap::new();
    for c in &captions {
        if !embedded.contains_key(&c.text) {
            let result = encoder.embed_text(&c.text).map(Arc::new);
            embedded.insert(c.text.clone(), result);
        }
    }
    let failures = captions
        .iter()
        .filter_map(|c| match &embedded[&c.text] {
            Err(e) => Some((c.clone(), e.clone())),
            Ok(_) => None,
        })
        .collect();
    let pool = CaptionPool::assemble(video_id, captions, |text| {
        embedded.get(text).and_then(|r| r.as_ref().ok().cloned())
    })?;
    Ok(PoolBuild { pool, failures })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanedCaption {
    pub frame_index: usize,
    pub caption: CaptionRecord,
    /// Similarity between the frame's image embedding and the chosen
    /// caption; absent for uncleaned frames.
    pub similarity: Option<f64>,
    /// False when the frame had no image embedding and kept a raw caption.
    pub cleaned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanedCaptions {
    pub video_id: String,
    pub entries: Vec<CleanedCaption>,
}

impl CleanedCaptions {
    pub fn texts(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.caption.text.as_str()).collect()
    }

    pub fn get(&self, frame_index: usize) -> Option<&CleanedCaption> {
        self.entries
            .binary_search_by_key(&frame_index, |e| e.frame_index)
            .ok()
            .map(|i| &self.entries[i])
    }
}

/// Replaces each sampled frame's caption with its closest pool caption.
///
/// `image_embeddings[i]` belongs to `frames.indices[i]`. A frame without an
/// image embedding keeps one of its own raw captions (or, if it has none,
/// the caption of the nearest frame) and is flagged uncleaned.
pub fn clean_captions(
    frames: &SampledSequence,
    image_embeddings: &[Option<EmbeddingVector>],
    pool: &CaptionPool,
) -> Result<CleanedCaptions, CleaningError> {
    if frames.len() != image_embeddings.len() {
        return Err(CleaningError::MisalignedInputs {
            frames: frames.len(),
            embeddings: image_embeddings.len(),
        });
    }
    let entries = frames
        .indices
        .iter()
        .zip(image_embeddings)
        .map(|(&frame_index, image)| match image {
            Some(image) => {
                let (entry, sim) = pool.best_match(image)?;
                Ok(CleanedCaption {
                    frame_index,
                    caption: entry.caption.clone(),
                    similarity: Some(sim.clamp(-1.0, 1.0)),
                    cleaned: true,
                })
            }
            None => {
                let entry = pool
                    .own_captions(frame_index)
                    .next()
                    .unwrap_or_else(|| pool.nearest_caption(frame_index));
                Ok(CleanedCaption {
                    frame_index,
                    caption: entry.caption.clone(),
                    similarity: None,
                    cleaned: false,
                })
            }
        })
        .collect::<Result<Vec<_>, CleaningError>>()?;
    Ok(CleanedCaptions {
        video_id: frames.video_id.clone(),
        entries,
    })
}
