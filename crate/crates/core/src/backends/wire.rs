//! JSON bodies of the backend HTTP protocol.
//!
//! ```text
//! POST /v1/complete  {"model","prompt","temperature","max_tokens"} -> {"text"}
//! POST /v1/embed     {"model","modality","input"}                  -> {"embedding","dim"}
//! POST /v1/caption   {"model","uri"}                               -> {"text"}
//! non-200            {"error": {"retryable", "message"}}
//! ```

use serde::{Deserialize, Serialize};

pub const COMPLETE_PATH: &str = "/v1/complete";
pub const EMBED_PATH: &str = "/v1/embed";
pub const CAPTION_PATH: &str = "/v1/caption";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
    Video,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub model: String,
    pub modality: Modality,
    pub input: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub model: String,
    pub uri: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextResponse {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub embedding: Vec<f32>,
    pub dim: usize,
    /// Informational; the engine renormalizes regardless.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalized: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub retryable: bool,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEnvelope {
    pub error: ErrorBody,
}
