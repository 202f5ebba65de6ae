//! Frame-level evaluation: lattice-to-frame expansion, ROC AUC, average
//! precision and thresholded detections.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{labels_from_intervals, GroundTruth, ModelError, ScoreSeries, VideoMeta};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("score at position {0} is not finite")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How lattice scores are spread over the frames between lattice points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionMode {
    /// Nearest lattice frame; exact midpoints take the earlier one.
    #[default]
    Nearest,
    /// Last lattice frame at or before the frame.
    StepHold,
}

impl fmt::Display for ExpansionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpansionMode::Nearest => "nearest",
            ExpansionMode::StepHold => "step_hold",
        })
    }
}

impl FromStr for ExpansionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nearest" => Ok(ExpansionMode::Nearest),
            "step_hold" | "step-hold" => Ok(ExpansionMode::StepHold),
            other => Err(format!("unknown expansion mode `{other}`")),
        }
    }
}

/// Per-frame scores from lattice scores. `frame_indices` must be strictly
/// increasing and start at 0.
pub fn expand_scores(
    frame_indices: &[usize],
    scores: &[f64],
    num_frames: usize,
    mode: ExpansionMode,
) -> Vec<f64> {
    assert_eq!(frame_indices.len(), scores.len());
    assert!(!frame_indices.is_empty(), "empty lattice");
    let mut out = Vec::with_capacity(num_frames);
    let mut pos = 0;
    for f in 0..num_frames {
        while pos + 1 < frame_indices.len() && frame_indices[pos + 1] <= f {
            pos += 1;
        }
        let chosen = match mode {
            ExpansionMode::StepHold => pos,
            ExpansionMode::Nearest => {
                if frame_indices[pos] >= f || pos + 1 == frame_indices.len() {
                    pos
                } else {
                    let before = f - frame_indices[pos];
                    let after = frame_indices[pos + 1] - f;
                    if after < before {
                        pos + 1
                    } else {
                        pos
                    }
                }
            }
        };
        out.push(scores[chosen]);
    }
    out
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite(i));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    Ok((positives, labels.len() - positives))
}

/// ROC AUC as the Mann-Whitney statistic: the probability that a random
/// positive outscores a random negative, ties counting one half. Computed
/// from tie-averaged ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let (positives, negatives) = check_inputs(scores, labels)?;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::Undefined("ROC AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the rank sum keeps tie-averaged ranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // 1-based ranks start+1 ..= end share their mean.
        let twice_avg = (start + 1 + end) as u128;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i]).count() as u128;
        twice_rank_sum += twice_avg * pos_in_group;
        start = end;
    }
    let p = positives as u128;
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// Average precision: mean of precision@rank over the ranks of positives,
/// ranking by descending score with ties in original index order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let (positives, _) = check_inputs(scores, labels)?;
    if positives == 0 {
        return Err(MetricError::Undefined("average precision needs a positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

/// Maximal runs of frames scoring at least `threshold`, as inclusive ranges.
pub fn threshold_detections(scores: &[f64], threshold: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match (s >= threshold, open) {
            (true, None) => open = Some(i),
            (false, Some(start)) => {
                out.push((start, i - 1));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(start) = open {
        out.push((start, scores.len() - 1));
    }
    out
}

/// Lattice scores of one video as they appear in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoCurve {
    pub video_id: String,
    pub num_frames: usize,
    pub frame_indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub anomalous_frames: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset: String,
    /// Hash of every setting and model tag that affects the scores.
    pub fingerprint: String,
    pub label: String,
    pub num_videos: usize,
    pub num_frames: usize,
    pub positive_frames: usize,
    pub roc_auc: Option<f64>,
    pub average_precision: Option<f64>,
    pub videos: Vec<VideoCurve>,
}

/// One video ready for evaluation.
pub struct ScoredVideo<'a> {
    pub meta: &'a VideoMeta,
    pub series: &'a ScoreSeries,
    pub truth: &'a GroundTruth,
    pub flags: Vec<String>,
}

/// Frame-level metrics over all videos concatenated.
pub fn evaluate(
    dataset: &str,
    label: &str,
    fingerprint: &str,
    videos: &[ScoredVideo<'_>],
    mode: ExpansionMode,
) -> Result<EvaluationReport, MetricError> {
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    let mut curves = Vec::with_capacity(videos.len());
    for v in videos {
        let lattice_scores = v.series.final_scores();
        let frame_scores = expand_scores(&v.series.frame_indices, &lattice_scores, v.meta.num_frames, mode);
        let labels = labels_from_intervals(v.truth, v.meta.num_frames)?;
        all_scores.extend(frame_scores);
        all_labels.extend(labels.iter().map(|&l| l == 1));
        curves.push(VideoCurve {
            video_id: v.meta.video_id.clone(),
            num_frames: v.meta.num_frames,
            frame_indices: v.series.frame_indices.clone(),
            scores: lattice_scores,
            anomalous_frames: v.truth.anomalous_frames(),
            flags: v.flags.clone(),
        });
    }
    let positive_frames = all_labels.iter().filter(|&&l| l).count();
    Ok(EvaluationReport {
        dataset: dataset.to_string(),
        fingerprint: fingerprint.to_string(),
        label: label.to_string(),
        num_videos: videos.len(),
        num_frames: all_scores.len(),
        positive_frames,
        roc_auc: roc_auc(&all_scores, &all_labels).ok(),
        average_precision: average_precision(&all_scores, &all_labels).ok(),
        videos: curves,
    })
}

/// Writes `frame_index,score,label` rows for plotting.
pub fn write_curve_csv(
    path: &Path,
    frame_scores: &[f64],
    labels: &[u8],
) -> Result<(), std::io::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["frame_index", "score", "label"])?;
    for (i, (s, l)) in frame_scores.iter().zip(labels).enumerate() {
        w.write_record([i.to_string(), s.to_string(), l.to_string()])?;
    }
    w.flush()
}

/// Renders reports as a fixed-width text table.
pub fn render_table(reports: &[EvaluationReport], out: &mut impl Write) -> std::io::Result<()> {
    let width = reports.iter().map(|r| r.label.len()).max().unwrap_or(0).max(40);
    writeln!(out, "{:<width$} {:>10} {:>10}  fingerprint", "setting", "auc", "ap")?;
    for r in reports {
        let fmt = |v: Option<f64>| v.map(|x| format!("{:.4}", x)).unwrap_or_else(|| "-".into());
        writeln!(
            out,
            "{:<width$} {:>10} {:>10}  {}",
            r.label,
            fmt(r.roc_auc),
            fmt(r.average_precision),
            r.fingerprint
        )?;
    }
    Ok(())
}
