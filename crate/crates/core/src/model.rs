//! Domain types shared by every pipeline stage, plus the frame sampling and
//! labeling primitives.
//!
//! Frame indices are 0-based everywhere. A timestamp is always
//! `frame_index / fps`.

use std::fmt;
use std::num::NonZeroUsize;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Tolerance on the L2 norm of a normalized embedding.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid video metadata for `{video_id}`: {reason}")]
    InvalidVideo { video_id: String, reason: String },
    #[error("empty caption text for `{video_id}` frame {frame_index} ({source_id})")]
    EmptyCaption {
        video_id: String,
        frame_index: usize,
        source_id: String,
    },
    #[error("embedding is degenerate: {0}")]
    DegenerateEmbedding(&'static str),
    #[error("annotation error for `{video_id}`: interval ({start}, {end}) {reason}")]
    Annotation {
        video_id: String,
        start: usize,
        end: usize,
        reason: &'static str,
    },
    #[error("invalid score series for `{video_id}`: {reason}")]
    InvalidSeries { video_id: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    pub num_frames: usize,
    pub fps: f64,
}

impl VideoMeta {
    pub fn new(video_id: impl Into<String>, num_frames: usize, fps: f64) -> Result<Self, ModelError> {
        let meta = Self {
            video_id: video_id.into(),
            num_frames,
            fps,
        };
        meta.validate()?;
        Ok(meta)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: &str| ModelError::InvalidVideo {
            video_id: self.video_id.clone(),
            reason: reason.to_string(),
        };
        if self.video_id.trim().is_empty() {
            return Err(fail("video_id is empty"));
        }
        if self.num_frames == 0 {
            return Err(fail("num_frames must be at least 1"));
        }
        if !self.fps.is_finite() || self.fps <= 0.0 {
            return Err(fail("fps must be finite and positive"));
        }
        Ok(())
    }

    pub fn time_of(&self, frame_index: usize) -> f64 {
        frame_index as f64 / self.fps
    }

    /// Length of the video in seconds.
    pub fn duration(&self) -> f64 {
        self.num_frames as f64 / self.fps
    }
}

/// The decimated frame lattice on which captions, summaries and scores live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledSequence {
    pub video_id: String,
    pub stride: usize,
    pub indices: Vec<usize>,
}

impl SampledSequence {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Lattice position of a frame index, if it is on the lattice.
    pub fn position(&self, frame_index: usize) -> Option<usize> {
        self.indices.binary_search(&frame_index).ok()
    }
}

/// Samples `0, stride, 2*stride, ...` strictly below `num_frames`.
pub fn sample_frames(meta: &VideoMeta, stride: NonZeroUsize) -> SampledSequence {
    SampledSequence {
        video_id: meta.video_id.clone(),
        stride: stride.get(),
        indices: (0..meta.num_frames).step_by(stride.get()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub video_id: String,
    pub frame_index: usize,
    pub source_id: String,
    pub text: String,
}

impl CaptionRecord {
    /// Builds a record with whitespace-trimmed text; empty text is rejected.
    pub fn new(
        video_id: impl Into<String>,
        frame_index: usize,
        source_id: impl Into<String>,
        text: &str,
    ) -> Result<Self, ModelError> {
        let video_id = video_id.into();
        let source_id = source_id.into();
        let text = text.trim();
        if text.is_empty() {
            return Err(ModelError::EmptyCaption {
                video_id,
                frame_index,
                source_id,
            });
        }
        Ok(Self {
            video_id,
            frame_index,
            source_id,
            text: text.to_string(),
        })
    }
}

/// A unit-norm vector in the shared text/image/video embedding space.
///
/// Construction always normalizes, so cosine similarity between two vectors
/// is their dot product.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn normalized(values: Vec<f32>) -> Result<Self, ModelError> {
        if values.is_empty() {
            return Err(ModelError::DegenerateEmbedding("zero dimensions"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::DegenerateEmbedding("non-finite component"));
        }
        let norm = values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(ModelError::DegenerateEmbedding("zero norm"));
        }
        let values = values
            .into_iter()
            .map(|v| (f64::from(v) / norm) as f32)
            .collect();
        Ok(Self { values })
    }

    /// Wraps values that are already unit-norm (e.g. read back from a
    /// cache), checking the norm instead of renormalizing so the stored bits
    /// are preserved.
    pub fn from_unit(values: Vec<f32>) -> Result<Self, ModelError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::DegenerateEmbedding("empty or non-finite"));
        }
        let v = Self { values };
        if (v.norm() - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(ModelError::DegenerateEmbedding("not unit norm"));
        }
        Ok(v)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Cosine similarity, accumulated in f64 in index order.
    pub fn dot(&self, other: &EmbeddingVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            values: Vec<f32>,
        }
        let raw = Raw::deserialize(deserializer)?;
        EmbeddingVector::from_unit(raw.values).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalWindow {
    pub center_frame: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub member_frames: Vec<usize>,
}

/// One of the eleven admissible anomaly scores `k / 10`, `k = 0..=10`.
///
/// Stored as the integer `k` so set membership is exact; serialized as the
/// decimal value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ScoreLevel(u8);

impl ScoreLevel {
    pub const MIN: ScoreLevel = ScoreLevel(0);
    pub const MAX: ScoreLevel = ScoreLevel(10);

    pub fn from_tenths(tenths: u8) -> Option<Self> {
        (tenths <= 10).then_some(Self(tenths))
    }

    /// Clamps to `[0, 1]` and snaps to the nearest level; exact midpoints
    /// snap upward.
    pub fn snap(value: f64) -> Option<Self> {
        if !value.is_finite() {
            return None;
        }
        let clamped = value.clamp(0.0, 1.0);
        // The epsilon pushes decimal midpoints such as 0.25 (which is not
        // exactly representable) onto the upper level.
        let tenths = (clamped * 10.0 + 0.5 + 1e-9).floor();
        Some(Self(tenths.min(10.0) as u8))
    }

    pub fn tenths(self) -> u8 {
        self.0
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 10.0
    }

    pub fn all() -> impl Iterator<Item = ScoreLevel> {
        (0..=10).map(ScoreLevel)
    }
}

impl fmt::Display for ScoreLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == 10 {
            write!(f, "1.0")
        } else {
            write!(f, "0.{}", self.0)
        }
    }
}

impl Serialize for ScoreLevel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for ScoreLevel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(deserializer)?;
        let level = ScoreLevel::snap(v).ok_or_else(|| serde::de::Error::custom("non-finite score"))?;
        if (level.value() - v).abs() > 1e-9 {
            return Err(serde::de::Error::custom(format!(
                "score {v} is not one of the eleven admissible levels"
            )));
        }
        Ok(level)
    }
}

/// Per-lattice-frame anomaly scores of one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub video_id: String,
    pub frame_indices: Vec<usize>,
    pub initial: Vec<ScoreLevel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refined: Option<Vec<f64>>,
}

impl ScoreSeries {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| ModelError::InvalidSeries {
            video_id: self.video_id.clone(),
            reason,
        };
        if self.initial.len() != self.frame_indices.len() {
            return Err(fail(format!(
                "{} initial scores for {} frames",
                self.initial.len(),
                self.frame_indices.len()
            )));
        }
        if self.frame_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(fail("frame indices are not strictly increasing".into()));
        }
        if let Some(refined) = &self.refined {
            if refined.len() != self.frame_indices.len() {
                return Err(fail("refined length differs from lattice".into()));
            }
            if refined.iter().any(|s| !(0.0..=1.0).contains(s)) {
                return Err(fail("refined score outside [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn initial_values(&self) -> Vec<f64> {
        self.initial.iter().map(|s| s.value()).collect()
    }

    /// Refined scores when present, otherwise the initial ones.
    pub fn final_scores(&self) -> Vec<f64> {
        self.refined.clone().unwrap_or_else(|| self.initial_values())
    }
}

/// Inclusive anomalous frame ranges of one video, sorted and disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video_id: String,
    pub intervals: Vec<(usize, usize)>,
}

impl GroundTruth {
    /// Sorts the intervals and rejects reversed or overlapping ones.
    pub fn new(video_id: impl Into<String>, mut intervals: Vec<(usize, usize)>) -> Result<Self, ModelError> {
        let video_id = video_id.into();
        intervals.sort_unstable();
        for &(start, end) in &intervals {
            if end < start {
                return Err(ModelError::Annotation {
                    video_id,
                    start,
                    end,
                    reason: "ends before it starts",
                });
            }
        }
        for pair in intervals.windows(2) {
            if pair[1].0 <= pair[0].1 {
                return Err(ModelError::Annotation {
                    video_id,
                    start: pair[1].0,
                    end: pair[1].1,
                    reason: "overlaps the previous interval",
                });
            }
        }
        Ok(Self { video_id, intervals })
    }

    pub fn normal(video_id: impl Into<String>) -> Self {
        Self {
            video_id: video_id.into(),
            intervals: Vec::new(),
        }
    }

    pub fn anomalous_frames(&self) -> usize {
        self.intervals.iter().map(|(s, e)| e - s + 1).sum()
    }
}

/// Expands interval annotations into one 0/1 label per frame.
pub fn labels_from_intervals(gt: &GroundTruth, num_frames: usize) -> Result<Vec<u8>, ModelError> {
    let mut labels = vec![0u8; num_frames];
    for &(start, end) in &gt.intervals {
        if end < start || end >= num_frames {
            return Err(ModelError::Annotation {
                video_id: gt.video_id.clone(),
                start,
                end,
                reason: "lies outside the video",
            });
        }
        labels[start..=end].fill(1);
    }
    Ok(labels)
}
