//! Run configuration and output fingerprints.
//!
//! Every cached stage is keyed by a fingerprint that covers exactly the
//! settings able to change that stage's output, chained through its
//! upstream stages. Settings that only affect scheduling (worker counts,
//! paths, timeouts) never enter a fingerprint.

use std::collections::BTreeSet;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{BackendDescriptor, BackendKind, RetryPolicy};
use crate::cleaning::PoolingMode;
use crate::evaluation::ExpansionMode;
use crate::scoring::PromptVariant;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where one backend lives. The kind is implied by the slot it fills.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    #[serde(default = "mock_endpoint")]
    pub endpoint: String,
    pub model_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
}

fn mock_endpoint() -> String {
    "mock".into()
}
fn default_timeout() -> f64 {
    60.0
}
fn default_inflight() -> usize {
    4
}

impl EndpointConfig {
    pub fn mock(model_tag: &str) -> Self {
        Self {
            endpoint: mock_endpoint(),
            model_tag: model_tag.into(),
            embed_dim: None,
            timeout_s: default_timeout(),
            max_inflight: default_inflight(),
        }
    }

    pub fn descriptor(&self, kind: BackendKind) -> BackendDescriptor {
        let mut d = BackendDescriptor::mock(kind, self.model_tag.clone());
        d.endpoint = self.endpoint.clone();
        // remote encoders must state their dimension; mocks have a default
        if self.embed_dim.is_some() || !d.is_mock() {
            d.embed_dim = self.embed_dim.filter(|_| d.is_encoder());
        }
        d.timeout_s = self.timeout_s;
        d.max_inflight = self.max_inflight;
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    /// Ordered; the first is the primary source.
    pub captioners: Vec<EndpointConfig>,
    pub text_encoder: EndpointConfig,
    pub image_encoder: EndpointConfig,
    pub video_encoder: EndpointConfig,
    pub llm: EndpointConfig,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            captioners: [
                "blip2-flan-t5-xl",
                "blip2-flan-t5-xl-coco",
                "blip2-flan-t5-xxl",
                "blip2-opt-6.7b",
                "blip2-opt-6.7b-coco",
            ]
            .into_iter()
            .map(EndpointConfig::mock)
            .collect(),
            text_encoder: EndpointConfig::mock("imagebind-huge"),
            image_encoder: EndpointConfig::mock("imagebind-huge"),
            video_encoder: EndpointConfig::mock("imagebind-huge"),
            llm: EndpointConfig::mock("llama-2-13b-chat"),
        }
    }
}

impl BackendsConfig {
    pub fn captioner_tags(&self) -> Vec<&str> {
        self.captioners.iter().map(|c| c.model_tag.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub stride: usize,
    pub window_seconds: f64,
    pub frames_per_window: usize,
    pub neighbors: usize,
    pub impersonation: bool,
    pub anomaly_prior: bool,
    /// Extra LLM calls allowed when a completion holds no score.
    pub retry_limit: u32,
    pub pooling: PoolingMode,
    pub skip_cleaning: bool,
    pub skip_summary: bool,
    pub skip_refinement: bool,
    pub dedupe_captions: bool,
    pub expansion: ExpansionMode,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_failure_fraction: f64,
    /// Videos processed concurrently.
    pub workers: usize,
    /// Requests issued concurrently within one video stage.
    pub frame_workers: usize,
    pub cache_dir: PathBuf,
    pub backend_retry: RetryPolicy,
    /// Mock fixture file, resolved against the config file's directory.
    pub mock_fixture: Option<PathBuf>,
    pub backends: BackendsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stride: 16,
            window_seconds: 10.0,
            frames_per_window: 10,
            neighbors: 10,
            impersonation: true,
            anomaly_prior: false,
            retry_limit: 3,
            pooling: PoolingMode::Ensemble,
            skip_cleaning: false,
            skip_summary: false,
            skip_refinement: false,
            dedupe_captions: false,
            expansion: ExpansionMode::Nearest,
            temperature: 0.0,
            max_tokens: 512,
            max_failure_fraction: 0.1,
            workers: 4,
            frame_workers: 8,
            cache_dir: PathBuf::from(".lavad-cache"),
            backend_retry: RetryPolicy::default(),
            mock_fixture: None,
            backends: BackendsConfig::default(),
        }
    }
}

/// The artifact stages, in pipeline order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Captions,
    ImageEmbeddings,
    PoolEmbeddings,
    Cleaned,
    Summaries,
    Elicitations,
    SubjectEmbeddings,
    SnippetEmbeddings,
    Scores,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Captions => "captions",
            Stage::ImageEmbeddings => "image_embeddings",
            Stage::PoolEmbeddings => "pool_embeddings",
            Stage::Cleaned => "cleaned",
            Stage::Summaries => "summaries",
            Stage::Elicitations => "elicitations",
            Stage::SubjectEmbeddings => "subject_embeddings",
            Stage::SnippetEmbeddings => "snippet_embeddings",
            Stage::Scores => "scores",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn digest(value: &serde_json::Value) -> String {
    // serde_json maps are ordered, so this rendering is canonical
    let hash = Sha256::digest(value.to_string().as_bytes());
    hash[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-stage fingerprints for one configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprints {
    /// Captions per source tag.
    pub captions: Vec<(String, String)>,
    pub image_embeddings: String,
    pub pool_embeddings: String,
    pub cleaned: String,
    pub summaries: Option<String>,
    pub elicitations: String,
    pub subject_embeddings: Option<String>,
    pub snippet_embeddings: Option<String>,
    pub scores: String,
    /// Fingerprint of the whole run (the report).
    pub run: String,
}

impl Fingerprints {
    pub fn of(&self, stage: Stage) -> Option<&str> {
        match stage {
            Stage::Captions => None,
            Stage::ImageEmbeddings => Some(&self.image_embeddings),
            Stage::PoolEmbeddings => Some(&self.pool_embeddings),
            Stage::Cleaned => Some(&self.cleaned),
            Stage::Summaries => self.summaries.as_deref(),
            Stage::Elicitations => Some(&self.elicitations),
            Stage::SubjectEmbeddings => self.subject_embeddings.as_deref(),
            Stage::SnippetEmbeddings => self.snippet_embeddings.as_deref(),
            Stage::Scores => Some(&self.scores),
        }
    }

    pub fn captions_for(&self, source: &str) -> Option<&str> {
        self.captions
            .iter()
            .find(|(s, _)| s == source)
            .map(|(_, fp)| fp.as_str())
    }
}

impl PipelineConfig {
    /// Surveillance-footage preset: impersonation prompt, ensemble pooling.
    pub fn ucf_crime() -> Self {
        Self::default()
    }

    /// Mixed-footage preset: anomaly prior, single best captioner.
    pub fn xd_violence() -> Self {
        Self {
            impersonation: false,
            anomaly_prior: true,
            pooling: PoolingMode::Single("blip2-flan-t5-xxl".into()),
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<inline>"),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a TOML config. A relative `mock_fixture` is resolved against the
    /// file's directory; `cache_dir` stays relative to the working directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: Self = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(fixture) = &cfg.mock_fixture {
            cfg.mock_fixture = Some(base.join(fixture));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.stride == 0 {
            return invalid("stride must be at least 1".into());
        }
        if !(self.window_seconds.is_finite() && self.window_seconds > 0.0) {
            return invalid(format!("window_seconds must be positive, got {}", self.window_seconds));
        }
        if self.frames_per_window == 0 {
            return invalid("frames_per_window must be at least 1".into());
        }
        if self.neighbors == 0 {
            return invalid("neighbors must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return invalid("max_failure_fraction must lie in [0, 1]".into());
        }
        if self.workers == 0 || self.frame_workers == 0 {
            return invalid("worker counts must be at least 1".into());
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return invalid("temperature must be a non-negative number".into());
        }
        let tags = self.backends.captioner_tags();
        if tags.is_empty() {
            return invalid("at least one captioner is required".into());
        }
        if tags.iter().collect::<BTreeSet<_>>().len() != tags.len() {
            return invalid("captioner model tags must be unique".into());
        }
        if let PoolingMode::Single(source) = &self.pooling {
            if !tags.contains(&source.as_str()) {
                return invalid(format!("pooling source {source:?} is not a configured captioner"));
            }
        }
        for (kind, e) in self.descriptors() {
            e.validate()
                .map_err(|err| ConfigError::Invalid(format!("{kind} backend: {err}")))?;
        }
        let dims: BTreeSet<Option<usize>> = [
            &self.backends.text_encoder,
            &self.backends.image_encoder,
            &self.backends.video_encoder,
        ]
        .iter()
        .map(|e| e.embed_dim)
        .collect();
        if dims.len() > 1 {
            return invalid("text, image and video encoders must share embed_dim".into());
        }
        Ok(())
    }

    pub fn descriptors(&self) -> Vec<(BackendKind, BackendDescriptor)> {
        let b = &self.backends;
        let mut out: Vec<(BackendKind, BackendDescriptor)> = b
            .captioners
            .iter()
            .map(|c| (BackendKind::Captioner, c.descriptor(BackendKind::Captioner)))
            .collect();
        for (kind, e) in [
            (BackendKind::TextEncoder, &b.text_encoder),
            (BackendKind::ImageEncoder, &b.image_encoder),
            (BackendKind::VideoEncoder, &b.video_encoder),
            (BackendKind::Llm, &b.llm),
        ] {
            out.push((kind, e.descriptor(kind)));
        }
        out
    }

    pub fn stride(&self) -> NonZeroUsize {
        NonZeroUsize::new(self.stride).expect("validated stride")
    }

    pub fn prompt_variant(&self) -> PromptVariant {
        PromptVariant {
            impersonation: self.impersonation,
            anomaly_prior: self.anomaly_prior,
        }
    }

    /// Sources whose captions enter the pool.
    pub fn pool_sources(&self) -> Vec<&str> {
        self.backends
            .captioner_tags()
            .into_iter()
            .filter(|t| self.pooling.admits(t))
            .collect()
    }

    /// Source whose raw caption stands in for a frame when cleaning is off.
    pub fn primary_source(&self) -> &str {
        match &self.pooling {
            PoolingMode::Single(source) => source,
            PoolingMode::Ensemble => &self.backends.captioners[0].model_tag,
        }
    }

    /// Caption sources the run actually queries.
    pub fn active_sources(&self) -> Vec<&str> {
        if self.skip_cleaning {
            vec![self.primary_source()]
        } else {
            self.pool_sources()
        }
    }

    fn decoding(&self) -> serde_json::Value {
        json!({
            "llm": self.backends.llm.model_tag,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "retry_limit": self.retry_limit,
        })
    }

    pub fn fingerprints(&self) -> Fingerprints {
        let b = &self.backends;
        let captions: Vec<(String, String)> = b
            .captioner_tags()
            .into_iter()
            .map(|t| (t.to_string(), digest(&json!(["captions", self.stride, t]))))
            .collect();
        let caption_fp = |t: &str| captions.iter().find(|(s, _)| s == t).map(|(_, fp)| fp.clone());
        let active: Vec<Option<String>> = self.active_sources().into_iter().map(caption_fp).collect();

        let image_embeddings = digest(&json!(["image", self.stride, b.image_encoder.model_tag]));
        let pool_embeddings = digest(&json!(["pool", active, b.text_encoder.model_tag]));
        let cleaned = if self.skip_cleaning {
            digest(&json!(["raw", active]))
        } else {
            digest(&json!(["cleaned", pool_embeddings, image_embeddings]))
        };
        let geometry = json!([self.stride, self.window_seconds, self.frames_per_window]);
        let summaries = (!self.skip_summary).then(|| {
            digest(&json!(["summaries", cleaned, geometry, self.dedupe_captions, self.decoding()]))
        });
        let subject = summaries.clone().unwrap_or_else(|| cleaned.clone());
        let elicitations = digest(&json!([
            "elicitations",
            subject,
            self.impersonation,
            self.anomaly_prior,
            self.decoding()
        ]));
        let (subject_embeddings, snippet_embeddings, scores) = if self.skip_refinement {
            (None, None, digest(&json!(["scores", elicitations])))
        } else {
            let subj = digest(&json!(["subject_embeddings", subject, b.text_encoder.model_tag]));
            let snip = digest(&json!(["snippets", geometry, b.video_encoder.model_tag]));
            let scores = digest(&json!(["scores", elicitations, subj, snip, self.neighbors]));
            (Some(subj), Some(snip), scores)
        };
        let run = digest(&json!(["run", scores, self.expansion.to_string()]));
        Fingerprints {
            captions,
            image_embeddings,
            pool_embeddings,
            cleaned,
            summaries,
            elicitations,
            subject_embeddings,
            snippet_embeddings,
            scores,
            run,
        }
    }

    /// Zero-shot baseline fingerprints: the embedding stage it reads (shared
    /// with the pipeline) and the report it produces.
    pub fn zs_fingerprints(&self, video: bool) -> (String, String) {
        let embeddings = if video {
            let mut full = self.clone();
            full.skip_refinement = false;
            full.fingerprints().snippet_embeddings.expect("refinement enabled")
        } else {
            self.fingerprints().image_embeddings
        };
        let run = digest(&json!([
            "zs",
            video,
            embeddings,
            self.backends.text_encoder.model_tag,
            self.expansion.to_string()
        ]));
        (embeddings, run)
    }

    /// Fingerprint of the report this configuration produces.
    pub fn fingerprint(&self) -> String {
        self.fingerprints().run
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub skip_cleaning: bool,
    pub skip_summary: bool,
    pub skip_refinement: bool,
    pub impersonation: Option<bool>,
    pub anomaly_prior: Option<bool>,
    pub neighbors: Option<usize>,
    pub window_seconds: Option<f64>,
    pub frames_per_window: Option<usize>,
    pub stride: Option<usize>,
    pub pooling: Option<PoolingMode>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut PipelineConfig) -> Result<(), ConfigError> {
        cfg.skip_cleaning |= self.skip_cleaning;
        cfg.skip_summary |= self.skip_summary;
        cfg.skip_refinement |= self.skip_refinement;
        if let Some(v) = self.impersonation {
            cfg.impersonation = v;
        }
        if let Some(v) = self.anomaly_prior {
            cfg.anomaly_prior = v;
        }
        if let Some(v) = self.neighbors {
            cfg.neighbors = v;
        }
        if let Some(v) = self.window_seconds {
            cfg.window_seconds = v;
        }
        if let Some(v) = self.frames_per_window {
            cfg.frames_per_window = v;
        }
        if let Some(v) = self.stride {
            cfg.stride = v;
        }
        if let Some(v) = &self.pooling {
            cfg.pooling = v.clone();
        }
        cfg.validate()
    }
}
