//! Model capabilities behind which every frozen model sits.
//!
//! There are five: captioner, text encoder, image encoder, video encoder and
//! LLM. Each has an HTTP client ([`http::HttpBackend`]) that speaks the
//! two-endpoint wire protocol in [`wire`], and a deterministic mock
//! ([`mock::MockBackend`]) used by tests and fixtures.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EmbeddingVector, TemporalWindow};

pub mod contract;
pub mod http;
pub mod limit;
pub mod mock;
pub mod wire;

pub use http::{HttpBackend, ReqwestTransport, Transport};
pub use limit::{InflightLimiter, RetryPolicy};
pub use mock::{MockBackend, MockFixture};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    /// Connection refused, timeout, reset. Always retryable.
    #[error("transport failure: {0}")]
    Transport(String),
    /// The server answered with an error status.
    #[error("backend rejected request (status {status}, retryable={retryable}): {message}")]
    Rejected {
        status: u16,
        retryable: bool,
        message: String,
    },
    /// A 200 answer whose body does not follow the protocol.
    #[error("malformed backend response: {0}")]
    Protocol(String),
    #[error("backend returned an empty response")]
    Empty,
    #[error("backend misconfigured: {0}")]
    Config(String),
    /// Retryable failures persisted through the whole retry budget.
    #[error("{target}: gave up after {attempts} attempts: {last}")]
    Exhausted {
        target: String,
        attempts: u32,
        last: Box<BackendError>,
    },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Protocol(_) | BackendError::Empty => true,
            BackendError::Rejected { retryable, .. } => *retryable,
            BackendError::Config(_) => false,
            BackendError::Exhausted { last, .. } => last.is_retryable(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Captioner,
    TextEncoder,
    ImageEncoder,
    VideoEncoder,
    Llm,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BackendKind::Captioner => "captioner",
            BackendKind::TextEncoder => "text_encoder",
            BackendKind::ImageEncoder => "image_encoder",
            BackendKind::VideoEncoder => "video_encoder",
            BackendKind::Llm => "llm",
        };
        f.write_str(s)
    }
}

fn default_timeout() -> f64 {
    60.0
}

fn default_inflight() -> usize {
    4
}

/// Where a backend lives and how hard it may be driven.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    /// Base URL of the service, or `"mock"`.
    pub endpoint: String,
    pub model_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
}

impl BackendDescriptor {
    pub fn mock(kind: BackendKind, model_tag: impl Into<String>) -> Self {
        let embed_dim = match kind {
            BackendKind::Captioner | BackendKind::Llm => None,
            _ => Some(mock::DEFAULT_MOCK_DIM),
        };
        Self {
            kind,
            endpoint: "mock".to_string(),
            model_tag: model_tag.into(),
            embed_dim,
            timeout_s: default_timeout(),
            max_inflight: default_inflight(),
        }
    }

    pub fn is_mock(&self) -> bool {
        self.endpoint == "mock"
    }

    pub fn is_encoder(&self) -> bool {
        matches!(
            self.kind,
            BackendKind::TextEncoder | BackendKind::ImageEncoder | BackendKind::VideoEncoder
        )
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.max_inflight == 0 {
            return Err(BackendError::Config(format!(
                "{} `{}`: max_inflight must be at least 1",
                self.kind, self.model_tag
            )));
        }
        if !(self.timeout_s.is_finite() && self.timeout_s > 0.0) {
            return Err(BackendError::Config(format!(
                "{} `{}`: timeout must be positive",
                self.kind, self.model_tag
            )));
        }
        if self.is_encoder() && self.embed_dim.unwrap_or(0) == 0 {
            return Err(BackendError::Config(format!(
                "{} `{}`: encoders need a nonzero embed_dim",
                self.kind, self.model_tag
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_kind(&self, kind: BackendKind) -> Result<(), BackendError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(BackendError::Config(format!(
                "backend `{}` is a {}, not a {}",
                self.model_tag, self.kind, kind
            )))
        }
    }
}

/// A single frame handed to a backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub video_id: String,
    pub frame_index: usize,
    pub uri: String,
}

/// A video snippet: the frames of one temporal window under a root location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnippetRef {
    pub video_id: String,
    pub root_uri: String,
    pub window: TemporalWindow,
}

impl SnippetRef {
    /// Wire form: the root with a media-fragment time range and the member
    /// frame list, e.g. `frames/v1#t=25.000,35.000&frames=400,416,432`.
    pub fn input_uri(&self) -> String {
        let frames = self
            .window
            .member_frames
            .iter()
            .map(|f| f.to_string())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "{}#t={:.3},{:.3}&frames={}",
            self.root_uri, self.window.start_s, self.window.end_s, frames
        )
    }
}

pub trait Captioner: Send + Sync {
    fn model_tag(&self) -> &str;
    fn caption(&self, frame: &FrameRef) -> Result<String, BackendError>;
}

pub trait TextEncoder: Send + Sync {
    fn model_tag(&self) -> &str;
    fn embed_dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError>;
}

pub trait ImageEncoder: Send + Sync {
    fn model_tag(&self) -> &str;
    fn embed_dim(&self) -> usize;
    fn embed_image(&self, frame: &FrameRef) -> Result<EmbeddingVector, BackendError>;
}

pub trait VideoEncoder: Send + Sync {
    fn model_tag(&self) -> &str;
    fn embed_dim(&self) -> usize;
    fn embed_video(&self, snippet: &SnippetRef) -> Result<EmbeddingVector, BackendError>;
}

pub trait Llm: Send + Sync {
    fn model_tag(&self) -> &str;
    fn complete(&self, prompt: &str) -> Result<String, BackendError>;
}

/// Every backend a run talks to. Captioners are ordered; the first one is
/// the primary source used when a single raw caption per frame is needed.
#[derive(Clone)]
pub struct BackendSet {
    pub captioners: Vec<Arc<dyn Captioner>>,
    pub text_encoder: Arc<dyn TextEncoder>,
    pub image_encoder: Arc<dyn ImageEncoder>,
    pub video_encoder: Arc<dyn VideoEncoder>,
    pub llm: Arc<dyn Llm>,
}

impl BackendSet {
    /// Checks that the three encoders share one embedding space.
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.captioners.is_empty() {
            return Err(BackendError::Config("at least one captioner is required".into()));
        }
        let dims = [
            self.text_encoder.embed_dim(),
            self.image_encoder.embed_dim(),
            self.video_encoder.embed_dim(),
        ];
        if dims.iter().any(|&d| d != dims[0]) {
            return Err(BackendError::Config(format!(
                "encoder dimensions disagree (text {}, image {}, video {})",
                dims[0], dims[1], dims[2]
            )));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.text_encoder.embed_dim()
    }

    /// Every model tag, in a fixed order, for fingerprinting.
    pub fn model_tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = self
            .captioners
            .iter()
            .map(|c| format!("captioner:{}", c.model_tag()))
            .collect();
        tags.push(format!("text_encoder:{}", self.text_encoder.model_tag()));
        tags.push(format!("image_encoder:{}", self.image_encoder.model_tag()));
        tags.push(format!("video_encoder:{}", self.video_encoder.model_tag()));
        tags.push(format!("llm:{}", self.llm.model_tag()));
        tags
    }
}
