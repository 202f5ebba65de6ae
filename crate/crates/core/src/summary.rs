//! Temporal windows around sampled frames and their LLM summaries.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, Llm};
use crate::cleaning::CleanedCaptions;
use crate::model::{SampledSequence, TemporalWindow, VideoMeta};
use crate::prompts;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SummaryError {
    #[error("frame {frame} of `{video_id}` has no cleaned caption")]
    MissingCaption { video_id: String, frame: usize },
}

/// Window of `window_seconds` centered on `center`, clipped to the video.
///
/// Members are the lattice frames nearest to `frames_per_window` equally
/// spaced target times across the clipped span (endpoints included),
/// restricted to lattice frames inside the span, deduplicated and sorted.
/// A single target sits on the center.
pub fn build_window(
    center: usize,
    meta: &VideoMeta,
    lattice: &SampledSequence,
    window_seconds: f64,
    frames_per_window: usize,
) -> TemporalWindow {
    debug_assert!(window_seconds > 0.0 && frames_per_window >= 1);
    let center_s = meta.time_of(center);
    let half = window_seconds / 2.0;
    let start_s = (center_s - half).max(0.0);
    let end_s = (center_s + half).min(meta.duration()).max(center_s);

    let inside: Vec<(usize, f64)> = lattice
        .indices
        .iter()
        .map(|&f| (f, meta.time_of(f)))
        .filter(|&(f, t)| (start_s <= t && t <= end_s) || f == center)
        .collect();

    let targets: Vec<f64> = if frames_per_window == 1 {
        vec![center_s]
    } else {
        let step = (end_s - start_s) / (frames_per_window - 1) as f64;
        (0..frames_per_window).map(|j| start_s + step * j as f64).collect()
    };

    let mut members: Vec<usize> = targets
        .iter()
        .map(|&target| {
            // `inside` is time-ordered, so the first minimum is the earlier frame.
            inside
                .iter()
                .min_by(|a, b| (a.1 - target).abs().total_cmp(&(b.1 - target).abs()))
                .map(|&(f, _)| f)
                .unwrap_or(center)
        })
        .collect();
    members.sort_unstable();
    members.dedup();

    TemporalWindow {
        center_frame: center,
        start_s,
        end_s,
        member_frames: members,
    }
}

/// One window per lattice frame.
pub fn build_windows(
    meta: &VideoMeta,
    lattice: &SampledSequence,
    window_seconds: f64,
    frames_per_window: usize,
) -> Vec<TemporalWindow> {
    lattice
        .indices
        .iter()
        .map(|&c| build_window(c, meta, lattice, window_seconds, frames_per_window))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub video_id: String,
    pub center_frame: usize,
    pub text: String,
    pub window: TemporalWindow,
    /// False when the LLM never produced a summary and `text` is the raw
    /// caption list.
    pub summarized: bool,
    pub attempts: u32,
}

/// Captions of the window members, in temporal order.
pub fn window_captions<'a>(
    window: &TemporalWindow,
    cleaned: &'a CleanedCaptions,
    dedupe_consecutive: bool,
) -> Result<Vec<&'a str>, SummaryError> {
    let mut captions: Vec<&str> = window
        .member_frames
        .iter()
        .map(|&f| {
            cleaned
                .get(f)
                .map(|c| c.caption.text.as_str())
                .ok_or_else(|| SummaryError::MissingCaption {
                    video_id: cleaned.video_id.clone(),
                    frame: f,
                })
        })
        .collect::<Result<_, _>>()?;
    if dedupe_consecutive {
        captions.dedup();
    }
    Ok(captions)
}

/// Asks the LLM to summarize the window's cleaned captions.
///
/// Empty completions are re-requested up to `retry_limit` times; a backend
/// error ends the attempt immediately (the client already retried it). On
/// failure the summary is the newline-joined caption list, flagged.
pub fn summarize(
    window: &TemporalWindow,
    cleaned: &CleanedCaptions,
    llm: &dyn Llm,
    retry_limit: u32,
    dedupe_consecutive: bool,
) -> Result<SummaryRecord, SummaryError> {
    let captions = window_captions(window, cleaned, dedupe_consecutive)?;
    let prompt = prompts::summary_prompt(&captions);
    let mut attempts = 0;
    let mut text = None;
    while attempts <= retry_limit {
        attempts += 1;
        match llm.complete(&prompt) {
            Ok(t) if !t.trim().is_empty() => {
                text = Some(t);
                break;
            }
            Ok(_) => continue,
            Err(e) => {
                log_failure(&cleaned.video_id, window.center_frame, &e);
                break;
            }
        }
    }
    let summarized = text.is_some();
    Ok(SummaryRecord {
        video_id: cleaned.video_id.clone(),
        center_frame: window.center_frame,
        text: text.unwrap_or_else(|| captions.join("\n")),
        window: window.clone(),
        summarized,
        attempts,
    })
}

fn log_failure(video_id: &str, frame: usize, e: &BackendError) {
    log::warn!("summary of `{video_id}` frame {frame} failed: {e}");
}
