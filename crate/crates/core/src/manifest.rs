//! Dataset manifests and temporal annotation files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{GroundTruth, ModelError, VideoMeta};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse manifest {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error(transparent)]
    Annotation(#[from] AnnotationError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error, PartialEq)]
pub enum AnnotationError {
    #[error("cannot read annotations {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("annotation for video `{video_id}`: interval ({start}, {end}) {reason}")]
    OutOfRange {
        video_id: String,
        start: usize,
        end: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationFormat {
    /// `name [class] s1 e1 [s2 e2 ...]`, with `-1 -1` marking an absent
    /// interval. Lists normal videos too.
    #[default]
    UcfInterval,
    /// `name s1 e1 [s2 e2 ...]`; lists anomalous videos only.
    XdInterval,
}

impl FromStr for AnnotationFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ucf_interval" | "ucf" => Ok(Self::UcfInterval),
            "xd_interval" | "xd" => Ok(Self::XdInterval),
            other => Err(format!("unknown annotation format `{other}`")),
        }
    }
}

const VIDEO_EXTENSIONS: [&str; 6] = ["mp4", "avi", "mkv", "mov", "webm", "mpg"];

/// Annotation names may carry a container extension; video ids never do.
pub fn video_id_from_name(name: &str) -> &str {
    match name.rsplit_once('.') {
        Some((stem, ext)) if VIDEO_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) => stem,
        _ => name,
    }
}

/// Parses annotation text. Comment lines (`#`) and blank lines are skipped.
pub fn parse_annotations(
    text: &str,
    format: AnnotationFormat,
    path: &Path,
) -> Result<BTreeMap<String, GroundTruth>, AnnotationError> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |reason: String| AnnotationError::Malformed {
            path: path.to_path_buf(),
            line: n + 1,
            reason,
        };
        let mut tokens = line.split_whitespace();
        let name = tokens.next().expect("non-empty line");
        let mut rest: Vec<&str> = tokens.collect();
        if format == AnnotationFormat::UcfInterval && rest.first().is_some_and(|t| t.parse::<i64>().is_err()) {
            rest.remove(0); // class label
        }
        let numbers: Vec<i64> = rest
            .iter()
            .map(|t| t.parse::<i64>().map_err(|_| malformed(format!("`{t}` is not an integer"))))
            .collect::<Result<_, _>>()?;
        if !numbers.len().is_multiple_of(2) {
            return Err(malformed(format!("odd number of bounds ({})", numbers.len())));
        }
        let mut intervals = Vec::new();
        for pair in numbers.chunks(2) {
            let (s, e) = (pair[0], pair[1]);
            if format == AnnotationFormat::UcfInterval && s == -1 && e == -1 {
                continue;
            }
            if s < 0 || e < 0 {
                return Err(malformed(format!("negative bound in ({s}, {e})")));
            }
            if e < s {
                return Err(malformed(format!("interval ({s}, {e}) ends before it starts")));
            }
            intervals.push((s as usize, e as usize));
        }
        let video_id = video_id_from_name(name);
        let gt = GroundTruth::new(video_id, intervals).map_err(|e| malformed(e.to_string()))?;
        if out.insert(video_id.to_string(), gt).is_some() {
            return Err(malformed(format!("video `{video_id}` annotated twice")));
        }
    }
    Ok(out)
}

/// Reads an annotation file.
pub fn ingest_annotations(
    path: &Path,
    format: AnnotationFormat,
) -> Result<BTreeMap<String, GroundTruth>, AnnotationError> {
    let text = std::fs::read_to_string(path).map_err(|e| AnnotationError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_annotations(&text, format, path)
}

/// Checks every interval against its video's length.
pub fn check_bounds(gt: &GroundTruth, meta: &VideoMeta) -> Result<(), AnnotationError> {
    match gt.intervals.iter().find(|&&(_, e)| e >= meta.num_frames) {
        Some(&(start, end)) => Err(AnnotationError::OutOfRange {
            video_id: gt.video_id.clone(),
            start,
            end,
            reason: format!("exceeds the video's {} frames", meta.num_frames),
        }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub dataset: String,
    /// Frame locator with `{video_id}`, `{frame}` and zero-padded
    /// `{frame:0N}` placeholders.
    pub frame_uri_template: String,
    /// Clip locator with a `{video_id}` placeholder; defaults to the video id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snippet_uri_template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotations: Option<PathBuf>,
    #[serde(default)]
    pub annotation_format: AnnotationFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_videos: Option<usize>,
    pub videos: Vec<VideoMeta>,
}

/// A validated manifest with its ground truth attached.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    /// One entry per manifest video; unannotated videos are normal.
    pub truth: BTreeMap<String, GroundTruth>,
}

impl DatasetManifest {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, ManifestError> {
        toml::from_str(text).map_err(|e| ManifestError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Reads a manifest; a relative annotation path is resolved against the
    /// manifest's directory.
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut m = Self::from_toml_str(&text, path)?;
        if let Some(a) = &m.annotations {
            if a.is_relative() {
                m.annotations = Some(path.parent().unwrap_or(Path::new(".")).join(a));
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.dataset.trim().is_empty() {
            return Err(ManifestError::Invalid("dataset name is empty".into()));
        }
        if !self.frame_uri_template.contains("{video_id}") || !self.frame_uri_template.contains("{frame") {
            return Err(ManifestError::Invalid(
                "frame_uri_template needs {video_id} and {frame} placeholders".into(),
            ));
        }
        let mut seen = BTreeSet::new();
        for v in &self.videos {
            v.validate()?;
            if !seen.insert(v.video_id.as_str()) {
                return Err(ManifestError::Invalid(format!("video `{}` listed twice", v.video_id)));
            }
        }
        if let Some(n) = self.expected_videos {
            if n != self.videos.len() {
                return Err(ManifestError::Invalid(format!(
                    "expected {n} videos, manifest lists {}",
                    self.videos.len()
                )));
            }
        }
        Ok(())
    }

    pub fn frame_uri(&self, video_id: &str, frame: usize) -> String {
        render_template(&self.frame_uri_template, video_id, Some(frame))
    }

    pub fn snippet_root(&self, video_id: &str) -> String {
        match &self.snippet_uri_template {
            Some(t) => render_template(t, video_id, None),
            None => video_id.to_string(),
        }
    }

    /// Loads ground truth and checks it against the videos. Annotation
    /// entries for videos outside the manifest are ignored.
    pub fn load_dataset(self) -> Result<Dataset, ManifestError> {
        let mut annotated = match &self.annotations {
            Some(path) => ingest_annotations(path, self.annotation_format)?,
            None => BTreeMap::new(),
        };
        let mut truth = BTreeMap::new();
        for v in &self.videos {
            let gt = annotated
                .remove(&v.video_id)
                .unwrap_or_else(|| GroundTruth::normal(v.video_id.clone()));
            check_bounds(&gt, v)?;
            truth.insert(v.video_id.clone(), gt);
        }
        for extra in annotated.keys() {
            log::warn!("annotation for `{extra}` has no manifest entry; ignored");
        }
        Ok(Dataset {
            manifest: self,
            truth,
        })
    }
}

fn render_template(template: &str, video_id: &str, frame: Option<usize>) -> String {
    let mut out = String::with_capacity(template.len() + 16);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}') else {
            break;
        };
        out.push_str(&rest[..open]);
        let key = &rest[open + 1..open + close];
        match (key, frame) {
            ("video_id", _) => out.push_str(video_id),
            ("frame", Some(f)) => out.push_str(&f.to_string()),
            (k, Some(f)) if k.starts_with("frame:0") && k[7..].parse::<usize>().is_ok() => {
                let width: usize = k[7..].parse().expect("checked");
                out.push_str(&format!("{f:0width$}"));
            }
            _ => out.push_str(&rest[open..=open + close]),
        }
        rest = &rest[open + close + 1..];
    }
    out.push_str(rest);
    out
}
