//! Zero-shot two-prompt baselines: softmax over the cosine similarities of
//! an image (or video) embedding to a "normal" and an "anomalous" prompt.

use thiserror::Error;

use crate::backends::{BackendError, TextEncoder};
use crate::model::EmbeddingVector;
use crate::prompts::{ZS_ANOMALOUS_PROMPT, ZS_NORMAL_PROMPT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("embedding dimension {found} does not match prompt dimension {expected}")]
    Dimension { expected: usize, found: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptPair {
    pub normal_text: String,
    pub anomalous_text: String,
    pub normal: EmbeddingVector,
    pub anomalous: EmbeddingVector,
}

impl PromptPair {
    pub fn new(
        normal_text: impl Into<String>,
        normal: EmbeddingVector,
        anomalous_text: impl Into<String>,
        anomalous: EmbeddingVector,
    ) -> Result<Self, BaselineError> {
        if normal.dim() != anomalous.dim() {
            return Err(BaselineError::Dimension {
                expected: normal.dim(),
                found: anomalous.dim(),
            });
        }
        Ok(Self {
            normal_text: normal_text.into(),
            anomalous_text: anomalous_text.into(),
            normal,
            anomalous,
        })
    }

    /// "a standard scene" vs "a scene with suspicious or potentially
    /// criminal activities", embedded with `encoder`.
    pub fn standard(encoder: &dyn TextEncoder) -> Result<Self, BaselineError> {
        let normal = encoder.embed_text(ZS_NORMAL_PROMPT)?;
        let anomalous = encoder.embed_text(ZS_ANOMALOUS_PROMPT)?;
        Self::new(ZS_NORMAL_PROMPT, normal, ZS_ANOMALOUS_PROMPT, anomalous)
    }

    pub fn swapped(&self) -> Self {
        Self {
            normal_text: self.anomalous_text.clone(),
            anomalous_text: self.normal_text.clone(),
            normal: self.anomalous.clone(),
            anomalous: self.normal.clone(),
        }
    }
}

/// `e^{s_a} / (e^{s_a} + e^{s_n})`, evaluated as a logistic of the gap.
pub fn two_prompt_softmax(anomalous_sim: f64, normal_sim: f64) -> f64 {
    1.0 / (1.0 + (normal_sim - anomalous_sim).exp())
}

pub fn zs_two_prompt_score(item: &EmbeddingVector, pair: &PromptPair) -> Result<f64, BaselineError> {
    if item.dim() != pair.normal.dim() {
        return Err(BaselineError::Dimension {
            expected: pair.normal.dim(),
            found: item.dim(),
        });
    }
    Ok(two_prompt_softmax(item.dot(&pair.anomalous), item.dot(&pair.normal)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::normalized(v.to_vec()).unwrap()
    }

    fn pair() -> PromptPair {
        PromptPair::new("n", unit(&[1.0, 0.0, 0.0]), "a", unit(&[0.0, 1.0, 0.0])).unwrap()
    }

    #[test]
    fn symmetric_similarity_gives_half() {
        let s = zs_two_prompt_score(&unit(&[1.0, 1.0, 0.0]), &pair()).unwrap();
        assert!((s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn item_equal_to_anomalous_prompt() {
        let s = zs_two_prompt_score(&unit(&[0.0, 1.0, 0.0]), &pair()).unwrap();
        let e = std::f64::consts::E;
        assert!((s - e / (e + 1.0)).abs() < 1e-9);
        assert!((s - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn swap_complements() {
        let item = unit(&[0.3, 0.9, 0.2]);
        let a = zs_two_prompt_score(&item, &pair()).unwrap();
        let b = zs_two_prompt_score(&item, &pair().swapped()).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(zs_two_prompt_score(&unit(&[1.0, 0.0]), &pair()).is_err());
        assert!(PromptPair::new("n", unit(&[1.0]), "a", unit(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn monotone_in_each_similarity() {
        assert!(two_prompt_softmax(0.3, 0.1) < two_prompt_softmax(0.4, 0.1));
        assert!(two_prompt_softmax(0.3, 0.1) > two_prompt_softmax(0.3, 0.2));
    }
}
