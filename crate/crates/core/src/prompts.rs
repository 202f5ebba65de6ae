//! Fixed prompt texts and the rules that compose them.

/// Summary prompt, followed by the numbered window captions.
pub const SUMMARY_PROMPT: &str = "Please summarize what happened in few sentences, based on the following temporal description of a scene. Do not include any unnecessary details or descriptions.";

/// Output-format prompt appended to every scoring context.
pub const FORMAT_PROMPT: &str = "Please provide the response in the form of a Python list and respond with only one number in the provided list below [0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0] without any textual explanation. It should begin with '[' and end with ']'.";

pub const BASE_CONTEXT: &str = "How would you rate the scene described on a scale from 0 to 1, with 0 representing a standard scene and 1 denoting a scene with suspicious activities?";

pub const IMPERSONATION_PREFIX: &str = "If you were a law enforcement agency,";

const PRIOR_ANCHOR: &str = "suspicious activities";
const PRIOR_REPLACEMENT: &str = "suspicious or potentially criminal activities";

/// Two-prompt pair of the zero-shot embedding baselines.
pub const ZS_NORMAL_PROMPT: &str = "a standard scene";
pub const ZS_ANOMALOUS_PROMPT: &str = "a scene with suspicious or potentially criminal activities";

/// Context prompt for the given prior flags.
///
/// The anomaly prior widens "suspicious activities" to "suspicious or
/// potentially criminal activities"; impersonation prepends the law
/// enforcement clause and lowercases the question's first letter.
pub fn render_context_prompt(impersonation: bool, anomaly_prior: bool) -> String {
    let mut question = BASE_CONTEXT.to_string();
    if anomaly_prior {
        question = question.replacen(PRIOR_ANCHOR, PRIOR_REPLACEMENT, 1);
    }
    if impersonation {
        let mut chars = question.chars();
        let first = chars.next().map(|c| c.to_lowercase().collect::<String>()).unwrap_or_default();
        question = format!("{IMPERSONATION_PREFIX} {first}{}", chars.as_str());
    }
    question
}

/// `context format` on one line, the subject on its own final line.
pub fn scoring_prompt(context: &str, subject: &str) -> String {
    format!("{context} {FORMAT_PROMPT}\n{subject}")
}

/// The summary prompt followed by `1. caption`, `2. caption`, ... one per line.
pub fn summary_prompt<S: AsRef<str>>(captions: &[S]) -> String {
    let mut prompt = SUMMARY_PROMPT.to_string();
    for (i, caption) in captions.iter().enumerate() {
        prompt.push('\n');
        prompt.push_str(&format!("{}. {}", i + 1, caption.as_ref()));
    }
    prompt
}

/// Inverse of [`summary_prompt`]: the listed captions, or `None` when the
/// prompt is not a summary prompt.
pub fn parse_summary_prompt(prompt: &str) -> Option<Vec<String>> {
    let rest = prompt.strip_prefix(SUMMARY_PROMPT)?;
    Some(
        rest.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let line = line.trim();
                match line.split_once(". ") {
                    Some((num, text)) if num.chars().all(|c| c.is_ascii_digit()) && !num.is_empty() => {
                        text.to_string()
                    }
                    _ => line.to_string(),
                }
            })
            .collect(),
    )
}
