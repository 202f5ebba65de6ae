//! LLM anomaly scoring of temporal summaries (or, for the caption-only
//! baseline, of single captions).

use serde::{Deserialize, Serialize};

use crate::backends::Llm;
use crate::model::{ScoreLevel, ScoreSeries};
use crate::prompts;

/// Context-prompt priors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptVariant {
    pub impersonation: bool,
    pub anomaly_prior: bool,
}

impl PromptVariant {
    /// Best setting on surveillance footage.
    pub const UCF_CRIME: PromptVariant = PromptVariant {
        impersonation: true,
        anomaly_prior: false,
    };
    /// Best setting on mixed-source footage.
    pub const XD_VIOLENCE: PromptVariant = PromptVariant {
        impersonation: false,
        anomaly_prior: true,
    };

    /// The four combinations, in ablation-table order: none, prior only,
    /// impersonation only, both.
    pub fn all() -> [PromptVariant; 4] {
        [
            PromptVariant { impersonation: false, anomaly_prior: false },
            PromptVariant { impersonation: false, anomaly_prior: true },
            PromptVariant { impersonation: true, anomaly_prior: false },
            PromptVariant { impersonation: true, anomaly_prior: true },
        ]
    }

    pub fn render(&self) -> String {
        prompts::render_context_prompt(self.impersonation, self.anomaly_prior)
    }
}

impl Default for PromptVariant {
    fn default() -> Self {
        Self::UCF_CRIME
    }
}

/// Extracts a score from a completion.
///
/// Takes the first `[...]` span whose content is a single finite number,
/// clamps it to `[0, 1]` and snaps it to the nearest tenth (midpoints go
/// up). Returns `None` when there is no such span.
pub fn parse_score(completion: &str) -> Option<ScoreLevel> {
    completion
        .match_indices('[')
        .filter_map(|(open, _)| {
            let rest = &completion[open + 1..];
            let close = rest.find(']')?;
            let value: f64 = rest[..close].trim().parse().ok()?;
            value.is_finite().then_some(value)
        })
        .next()
        .and_then(ScoreLevel::snap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreElicitation {
    pub subject_text: String,
    /// Completion of the last attempt.
    pub raw_completion: String,
    /// `None` marks a permanent failure.
    pub parsed: Option<ScoreLevel>,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Scores one subject (summary or caption).
///
/// Prompt is `context format` then the subject on its own line. A
/// completion without a parseable score is re-requested, for at most
/// `retry_limit + 1` LLM calls in total. A backend error stops immediately.
pub fn score_text(subject: &str, context: &str, llm: &dyn Llm, retry_limit: u32) -> ScoreElicitation {
    let prompt = prompts::scoring_prompt(context, subject);
    let mut out = ScoreElicitation {
        subject_text: subject.to_string(),
        raw_completion: String::new(),
        parsed: None,
        attempts: 0,
        error: None,
    };
    while out.attempts <= retry_limit {
        out.attempts += 1;
        match llm.complete(&prompt) {
            Ok(text) => {
                out.parsed = parse_score(&text);
                out.raw_completion = text;
                if out.parsed.is_some() {
                    break;
                }
            }
            Err(e) => {
                out.error = Some(e.to_string());
                break;
            }
        }
    }
    out
}

/// Initial score series plus bookkeeping on imputed positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialScores {
    pub series: ScoreSeries,
    /// Lattice positions whose score was imputed.
    pub imputed: Vec<usize>,
    /// Every elicitation failed; all scores are 0.
    pub all_failed: bool,
}

/// Turns per-frame elicitations into the initial score series.
///
/// Failed frames take the score of the temporally nearest successful frame
/// (the earlier one on ties). If nothing succeeded, every score is 0 and
/// the video is flagged.
pub fn assemble_initial_scores(
    video_id: &str,
    frame_indices: &[usize],
    parsed: &[Option<ScoreLevel>],
) -> InitialScores {
    assert_eq!(frame_indices.len(), parsed.len(), "one elicitation per sampled frame");
    let successes: Vec<usize> = (0..parsed.len()).filter(|&i| parsed[i].is_some()).collect();
    let mut imputed = Vec::new();
    let initial = (0..parsed.len())
        .map(|i| match parsed[i] {
            Some(s) => s,
            None => {
                imputed.push(i);
                successes
                    .iter()
                    .min_by_key(|&&j| (frame_indices[i].abs_diff(frame_indices[j]), frame_indices[j]))
                    .map(|&j| parsed[j].expect("successful"))
                    .unwrap_or(ScoreLevel::MIN)
            }
        })
        .collect();
    InitialScores {
        series: ScoreSeries {
            video_id: video_id.to_string(),
            frame_indices: frame_indices.to_vec(),
            initial,
            refined: None,
        },
        all_failed: successes.is_empty() && !parsed.is_empty(),
        imputed,
    }
}
