//! Deterministic stand-ins for the five model capabilities.
//!
//! Every output is a pure function of the inputs, the model tag and the
//! fixture seed. A [`MockFixture`] declares the "true" caption of frames;
//! the mock image encoder then places each frame's embedding next to the
//! text embedding of its true caption, which makes caption cleaning
//! predictable.
//!
//! Text embeddings are bags of hashed token vectors, so captions that share
//! words are similar. Encoders ignore their model tag: the three of them
//! share one embedding space.
//!
//! Mock LLM behaviour, checked in this order:
//! - a summary prompt is answered with its listed captions joined by spaces;
//! - `GARBLE_FIXTURE` anywhere yields a non-compliant answer;
//! - `SCORE_FIXTURE=x` yields `[x]`;
//! - anything else yields a hash-derived score in brackets.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    BackendDescriptor, BackendError, BackendKind, Captioner, FrameRef, ImageEncoder, Llm,
    SnippetRef, TextEncoder, VideoEncoder,
};
use crate::model::EmbeddingVector;
use crate::prompts;

pub const DEFAULT_MOCK_DIM: usize = 64;
pub const SCORE_MARKER: &str = "SCORE_FIXTURE=";
pub const GARBLE_MARKER: &str = "GARBLE_FIXTURE";

/// Norm of the offset between a frame's image embedding and the text
/// embedding of its true caption.
const PERTURBATION_NORM: f64 = 0.04;

fn default_seed() -> u64 {
    7
}

fn default_period() -> usize {
    16
}

/// Frames `start..=end` cycle through `captions`, advancing every
/// `caption_period` frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionSegment {
    pub start: usize,
    pub end: usize,
    pub captions: Vec<String>,
}

/// Captioner `source` reports `text` instead of the true caption on every
/// `every`-th sampled frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRule {
    pub source: String,
    pub every: usize,
    pub text: String,
}

/// Captioning of this frame fails permanently (for one source, or all).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFailure {
    #[serde(default)]
    pub source: Option<String>,
    pub video_id: String,
    pub frame_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockFixture {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_period")]
    pub caption_period: usize,
    #[serde(default)]
    pub videos: BTreeMap<String, Vec<CaptionSegment>>,
    #[serde(default)]
    pub noise: Vec<NoiseRule>,
    #[serde(default)]
    pub caption_failures: Vec<FrameFailure>,
}

impl Default for MockFixture {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            caption_period: default_period(),
            videos: BTreeMap::new(),
            noise: Vec::new(),
            caption_failures: Vec::new(),
        }
    }
}

impl MockFixture {
    pub fn true_caption(&self, video_id: &str, frame_index: usize) -> Option<&str> {
        let period = self.caption_period.max(1);
        self.videos
            .get(video_id)?
            .iter()
            .find(|seg| seg.start <= frame_index && frame_index <= seg.end && !seg.captions.is_empty())
            .map(|seg| {
                let i = ((frame_index - seg.start) / period) % seg.captions.len();
                seg.captions[i].as_str()
            })
    }

    fn caption_fails(&self, source: &str, video_id: &str, frame_index: usize) -> bool {
        self.caption_failures.iter().any(|f| {
            f.video_id == video_id
                && f.frame_index == frame_index
                && f.source.as_deref().is_none_or(|s| s == source)
        })
    }

    fn noise_for(&self, source: &str, frame_index: usize) -> Option<&str> {
        let ordinal = frame_index / self.caption_period.max(1);
        self.noise
            .iter()
            .find(|n| n.source == source && n.every > 0 && ordinal.is_multiple_of(n.every))
            .map(|n| n.text.as_str())
    }
}

fn rng_for(seed: u64, parts: &[&[u8]]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| f64::from(rng.next_u32()) / f64::from(u32::MAX) * 2.0 - 1.0)
        .collect()
}

fn to_unit(raw: &[f64]) -> EmbeddingVector {
    let values = raw.iter().map(|&v| v as f32).collect();
    EmbeddingVector::normalized(values).expect("mock vectors are finite and nonzero")
}

fn tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric() && c != '_' && c != '=' && c != '.')
                .trim_end_matches('.')
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

fn text_direction(seed: u64, dim: usize, text: &str) -> Vec<f64> {
    let toks = tokens(text);
    if toks.is_empty() {
        return random_direction(&mut rng_for(seed, &[b"text", text.as_bytes()]), dim);
    }
    let mut acc = vec![0.0; dim];
    for tok in &toks {
        let v = random_direction(&mut rng_for(seed, &[b"token", tok.as_bytes()]), dim);
        acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    acc
}

/// Text embedding used by every mock encoder.
pub fn mock_text_embedding(seed: u64, dim: usize, text: &str) -> EmbeddingVector {
    to_unit(&text_direction(seed, dim, text))
}

/// `anchor` moved by a small deterministic offset, renormalized.
fn perturbed(seed: u64, anchor: &EmbeddingVector, parts: &[&[u8]]) -> EmbeddingVector {
    let offset = random_direction(&mut rng_for(seed, parts), anchor.dim());
    let norm = offset.iter().map(|v| v * v).sum::<f64>().sqrt();
    let raw: Vec<f64> = anchor
        .values()
        .iter()
        .zip(&offset)
        .map(|(&a, &o)| f64::from(a) + o / norm * PERTURBATION_NORM)
        .collect();
    to_unit(&raw)
}

/// What the mock LLM answers to a summary prompt listing `captions`.
pub fn mock_summary(captions: &[String]) -> String {
    captions.join(" ")
}

const SUBJECTS: [&str; 6] = ["a man", "a woman", "two people", "a car", "a dog", "a group of people"];
const ACTIONS: [&str; 6] = ["standing", "walking", "waiting", "sitting", "moving slowly", "talking"];
const PLACES: [&str; 6] = [
    "in a parking lot",
    "on a street",
    "in a store",
    "near a building",
    "in a hallway",
    "at an intersection",
];

pub struct MockBackend {
    descriptor: BackendDescriptor,
    fixture: Arc<MockFixture>,
    calls: AtomicU64,
}

impl MockBackend {
    pub fn new(descriptor: BackendDescriptor, fixture: Arc<MockFixture>) -> Self {
        Self {
            descriptor,
            fixture,
            calls: AtomicU64::new(0),
        }
    }

    pub fn of_kind(kind: BackendKind, model_tag: &str, fixture: Arc<MockFixture>) -> Self {
        Self::new(BackendDescriptor::mock(kind, model_tag), fixture)
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    /// Number of requests served so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    fn dim(&self) -> usize {
        self.descriptor.embed_dim.unwrap_or(DEFAULT_MOCK_DIM)
    }

    fn seed(&self) -> u64 {
        self.fixture.seed
    }

    fn enter(&self, kind: BackendKind) -> Result<(), BackendError> {
        self.descriptor.expect_kind(kind)?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    fn derived_caption(&self, video_id: &str, frame_index: usize) -> String {
        let mut rng = rng_for(
            self.seed(),
            &[
                b"caption",
                video_id.as_bytes(),
                &(frame_index as u64).to_le_bytes(),
                self.descriptor.model_tag.as_bytes(),
            ],
        );
        let mut pick = |options: &[&'static str; 6]| options[(rng.next_u32() % 6) as usize];
        format!("{} {} {}", pick(&SUBJECTS), pick(&ACTIONS), pick(&PLACES))
    }

    fn frame_embedding(&self, video_id: &str, frame_index: usize) -> EmbeddingVector {
        let idx = (frame_index as u64).to_le_bytes();
        match self.fixture.true_caption(video_id, frame_index) {
            Some(caption) => {
                let anchor = mock_text_embedding(self.seed(), self.dim(), caption);
                perturbed(self.seed(), &anchor, &[b"image", video_id.as_bytes(), &idx])
            }
            None => to_unit(&random_direction(
                &mut rng_for(self.seed(), &[b"image-free", video_id.as_bytes(), &idx]),
                self.dim(),
            )),
        }
    }
}

impl Captioner for MockBackend {
    fn model_tag(&self) -> &str {
        &self.descriptor.model_tag
    }

    fn caption(&self, frame: &FrameRef) -> Result<String, BackendError> {
        self.enter(BackendKind::Captioner)?;
        let tag = &self.descriptor.model_tag;
        if self.fixture.caption_fails(tag, &frame.video_id, frame.frame_index) {
            return Err(BackendError::Rejected {
                status: 422,
                retryable: false,
                message: format!(
                    "fixture failure for video {} frame {}",
                    frame.video_id, frame.frame_index
                ),
            });
        }
        if self.fixture.true_caption(&frame.video_id, frame.frame_index).is_some() {
            if let Some(noise) = self.fixture.noise_for(tag, frame.frame_index) {
                return Ok(noise.to_string());
            }
        }
        Ok(self
            .fixture
            .true_caption(&frame.video_id, frame.frame_index)
            .map(str::to_string)
            .unwrap_or_else(|| self.derived_caption(&frame.video_id, frame.frame_index)))
    }
}

impl TextEncoder for MockBackend {
    fn model_tag(&self) -> &str {
        &self.descriptor.model_tag
    }

    fn embed_dim(&self) -> usize {
        self.dim()
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        self.enter(BackendKind::TextEncoder)?;
        if text.trim().is_empty() {
            return Err(BackendError::Config("cannot embed empty text".into()));
        }
        Ok(mock_text_embedding(self.seed(), self.dim(), text))
    }
}

impl ImageEncoder for MockBackend {
    fn model_tag(&self) -> &str {
        &self.descriptor.model_tag
    }

    fn embed_dim(&self) -> usize {
        self.dim()
    }

    fn embed_image(&self, frame: &FrameRef) -> Result<EmbeddingVector, BackendError> {
        self.enter(BackendKind::ImageEncoder)?;
        Ok(self.frame_embedding(&frame.video_id, frame.frame_index))
    }
}

impl VideoEncoder for MockBackend {
    fn model_tag(&self) -> &str {
        &self.descriptor.model_tag
    }

    fn embed_dim(&self) -> usize {
        self.dim()
    }

    /// Anchored on the mock summary of the members' true captions, so the
    /// snippet is closest to its own window's summary.
    fn embed_video(&self, snippet: &SnippetRef) -> Result<EmbeddingVector, BackendError> {
        self.enter(BackendKind::VideoEncoder)?;
        let captions: Vec<String> = snippet
            .window
            .member_frames
            .iter()
            .filter_map(|&f| self.fixture.true_caption(&snippet.video_id, f))
            .map(str::to_string)
            .collect();
        let center = (snippet.window.center_frame as u64).to_le_bytes();
        let parts: [&[u8]; 3] = [b"video", snippet.video_id.as_bytes(), &center];
        if captions.is_empty() {
            return Ok(to_unit(&random_direction(&mut rng_for(self.seed(), &parts), self.dim())));
        }
        let anchor = mock_text_embedding(self.seed(), self.dim(), &mock_summary(&captions));
        Ok(perturbed(self.seed(), &anchor, &parts))
    }
}

impl Llm for MockBackend {
    fn model_tag(&self) -> &str {
        &self.descriptor.model_tag
    }

    fn complete(&self, prompt: &str) -> Result<String, BackendError> {
        self.enter(BackendKind::Llm)?;
        if prompt.is_empty() {
            return Err(BackendError::Config("empty prompt".into()));
        }
        if let Some(captions) = prompts::parse_summary_prompt(prompt) {
            return Ok(mock_summary(&captions));
        }
        if prompt.contains(GARBLE_MARKER) {
            return Ok("I am not able to rate this scene.".to_string());
        }
        if let Some(pos) = prompt.find(SCORE_MARKER) {
            let value: String = prompt[pos + SCORE_MARKER.len()..]
                .chars()
                .take_while(|c| c.is_ascii_digit() || *c == '.' || *c == '-')
                .collect();
            let value = value.trim_end_matches('.');
            return Ok(format!("[{value}]"));
        }
        let mut rng = rng_for(
            self.seed(),
            &[b"score", self.descriptor.model_tag.as_bytes(), prompt.as_bytes()],
        );
        let tenths = rng.next_u32() % 11;
        Ok(if tenths == 10 {
            "[1.0]".to_string()
        } else {
            format!("[0.{tenths}]")
        })
    }
}
