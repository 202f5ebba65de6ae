use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::limit::{InflightLimiter, RetryPolicy};
use super::wire::{
    CaptionRequest, CompleteRequest, EmbedRequest, EmbedResponse, ErrorEnvelope, Modality,
    TextResponse, CAPTION_PATH, COMPLETE_PATH, EMBED_PATH,
};
use super::{
    BackendDescriptor, BackendError, BackendKind, Captioner, FrameRef, ImageEncoder, Llm,
    SnippetRef, TextEncoder, VideoEncoder,
};
use crate::model::EmbeddingVector;

/// Raw status and body of one HTTP exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct RawResponse {
    pub status: u16,
    pub body: String,
}

/// Moves one JSON request to a backend. `Err` is reserved for failures below
/// HTTP (connect, timeout); any HTTP status comes back as `Ok`.
pub trait Transport: Send + Sync {
    fn post(&self, path: &str, body: &serde_json::Value) -> Result<RawResponse, BackendError>;
}

#[derive(Clone)]
pub struct ReqwestTransport {
    base_url: String,
    client: reqwest::blocking::Client,
    bearer_token: Option<String>,
}

impl ReqwestTransport {
    pub fn new(
        base_url: impl Into<String>,
        timeout: Duration,
        bearer_token: Option<String>,
    ) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Config(format!("cannot build http client: {e}")))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            client,
            bearer_token,
        })
    }
}

impl Transport for ReqwestTransport {
    fn post(&self, path: &str, body: &serde_json::Value) -> Result<RawResponse, BackendError> {
        let mut req = self
            .client
            .post(format!("{}{}", self.base_url, path))
            .json(body);
        if let Some(token) = &self.bearer_token {
            req = req.bearer_auth(token);
        }
        let resp = req
            .send()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(RawResponse { status, body })
    }
}

/// Decoding parameters sent with every completion request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoding {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for Decoding {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 512,
        }
    }
}

/// Client for one remote backend. Implements every capability trait, but a
/// call only succeeds when it matches the descriptor's kind.
pub struct HttpBackend<T: Transport = ReqwestTransport> {
    descriptor: BackendDescriptor,
    transport: T,
    retry: RetryPolicy,
    limiter: Arc<InflightLimiter>,
    decoding: Decoding,
}

impl HttpBackend<ReqwestTransport> {
    pub fn connect(
        descriptor: BackendDescriptor,
        retry: RetryPolicy,
        bearer_token: Option<String>,
    ) -> Result<Self, BackendError> {
        descriptor.validate()?;
        let transport = ReqwestTransport::new(
            descriptor.endpoint.clone(),
            Duration::from_secs_f64(descriptor.timeout_s),
            bearer_token,
        )?;
        Self::with_transport(descriptor, transport, retry)
    }
}

impl<T: Transport> HttpBackend<T> {
    pub fn with_transport(
        descriptor: BackendDescriptor,
        transport: T,
        retry: RetryPolicy,
    ) -> Result<Self, BackendError> {
        descriptor.validate()?;
        let limiter = Arc::new(InflightLimiter::new(descriptor.max_inflight));
        Ok(Self {
            descriptor,
            transport,
            retry,
            limiter,
            decoding: Decoding::default(),
        })
    }

    pub fn with_decoding(mut self, decoding: Decoding) -> Self {
        self.decoding = decoding;
        self
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn call<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        path: &str,
        request: &Req,
        target: impl FnOnce() -> String,
    ) -> Result<Resp, BackendError> {
        let body = serde_json::to_value(request)
            .map_err(|e| BackendError::Config(format!("cannot encode request: {e}")))?;
        self.retry.run(target, || {
            let raw = {
                let _permit = self.limiter.acquire();
                self.transport.post(path, &body)?
            };
            interpret(raw)
        })
    }

    fn embed(&self, modality: Modality, input: String, target: impl FnOnce() -> String) -> Result<EmbeddingVector, BackendError> {
        let expected = self.descriptor.embed_dim.unwrap_or(0);
        let request = EmbedRequest {
            model: self.descriptor.model_tag.clone(),
            modality,
            input,
        };
        let resp: EmbedResponse = self.call(EMBED_PATH, &request, target)?;
        if resp.embedding.len() != resp.dim {
            return Err(BackendError::Protocol(format!(
                "embedding has {} values but dim says {}",
                resp.embedding.len(),
                resp.dim
            )));
        }
        if resp.dim != expected {
            return Err(BackendError::Config(format!(
                "`{}` returned dim {} but the run expects {}",
                self.descriptor.model_tag, resp.dim, expected
            )));
        }
        EmbeddingVector::normalized(resp.embedding).map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

fn interpret<Resp: DeserializeOwned>(raw: RawResponse) -> Result<Resp, BackendError> {
    if raw.status == 200 {
        return serde_json::from_str(&raw.body).map_err(|e| BackendError::Protocol(e.to_string()));
    }
    match serde_json::from_str::<ErrorEnvelope>(&raw.body) {
        Ok(env) => Err(BackendError::Rejected {
            status: raw.status,
            retryable: env.error.retryable,
            message: env.error.message,
        }),
        Err(_) => Err(BackendError::Rejected {
            status: raw.status,
            retryable: raw.status >= 500 || raw.status == 408 || raw.status == 429,
            message: raw.body.chars().take(200).collect(),
        }),
    }
}

fn nonempty(text: String) -> Result<String, BackendError> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        Err(BackendError::Empty)
    } else {
        Ok(trimmed.to_string())
    }
}

impl<T: Transport> Captioner for HttpBackend<T> {
    fn model_tag(&self) -> &str {
        &self.descriptor.model_tag
    }

    fn caption(&self, frame: &FrameRef) -> Result<String, BackendError> {
        self.descriptor.expect_kind(BackendKind::Captioner)?;
        let request = CaptionRequest {
            model: self.descriptor.model_tag.clone(),
            uri: frame.uri.clone(),
        };
        let target = || format!("caption of video {} frame {}", frame.video_id, frame.frame_index);
        let resp: TextResponse = self.call(CAPTION_PATH, &request, target)?;
        nonempty(resp.text)
    }
}

impl<T: Transport> TextEncoder for HttpBackend<T> {
    fn model_tag(&self) -> &str {
        &self.descriptor.model_tag
    }

    fn embed_dim(&self) -> usize {
        self.descriptor.embed_dim.unwrap_or(0)
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        self.descriptor.expect_kind(BackendKind::TextEncoder)?;
        if text.trim().is_empty() {
            return Err(BackendError::Config("cannot embed empty text".into()));
        }
        let preview: String = text.chars().take(40).collect();
        self.embed(Modality::Text, text.to_string(), || format!("text embedding of {preview:?}"))
    }
}

impl<T: Transport> ImageEncoder for HttpBackend<T> {
    fn model_tag(&self) -> &str {
        &self.descriptor.model_tag
    }

    fn embed_dim(&self) -> usize {
        self.descriptor.embed_dim.unwrap_or(0)
    }

    fn embed_image(&self, frame: &FrameRef) -> Result<EmbeddingVector, BackendError> {
        self.descriptor.expect_kind(BackendKind::ImageEncoder)?;
        self.embed(Modality::Image, frame.uri.clone(), || {
            format!("image embedding of video {} frame {}", frame.video_id, frame.frame_index)
        })
    }
}

impl<T: Transport> VideoEncoder for HttpBackend<T> {
    fn model_tag(&self) -> &str {
        &self.descriptor.model_tag
    }

    fn embed_dim(&self) -> usize {
        self.descriptor.embed_dim.unwrap_or(0)
    }

    fn embed_video(&self, snippet: &SnippetRef) -> Result<EmbeddingVector, BackendError> {
        self.descriptor.expect_kind(BackendKind::VideoEncoder)?;
        self.embed(Modality::Video, snippet.input_uri(), || {
            format!(
                "video embedding of video {} window at frame {}",
                snippet.video_id, snippet.window.center_frame
            )
        })
    }
}

impl<T: Transport> Llm for HttpBackend<T> {
    fn model_tag(&self) -> &str {
        &self.descriptor.model_tag
    }

    /// Returns the completion text verbatim. Emptiness is left to callers,
    /// which treat it as a parse failure.
    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        self.descriptor.expect_kind(BackendKind::Llm)?;
        if prompt.is_empty() {
            return Err(BackendError::Config("empty prompt".into()));
        }
        let request = CompleteRequest {
            model: self.descriptor.model_tag.clone(),
            prompt: prompt.to_string(),
            temperature: self.decoding.temperature,
            max_tokens: self.decoding.max_tokens,
        };
        let resp: TextResponse = self.call(COMPLETE_PATH, &request, || "llm completion".to_string())?;
        Ok(resp.text)
    }
}
