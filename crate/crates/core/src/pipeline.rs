//! Run orchestration: caption → clean → summarize → score → refine →
//! evaluate, per video, with every stage cached.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::http::Decoding;
use crate::backends::{
    BackendError, BackendKind, BackendSet, Captioner, FrameRef, HttpBackend, ImageEncoder, Llm, MockBackend,
    MockFixture, SnippetRef, TextEncoder, VideoEncoder,
};
use crate::baselines::{zs_two_prompt_score, BaselineError, PromptPair};
use crate::cache::{CacheError, StageCache};
use crate::cleaning::{clean_captions, CaptionPool, CleanedCaption, CleanedCaptions};
use crate::config::{ConfigError, Fingerprints, PipelineConfig, Stage};
use crate::evaluation::{evaluate, EvaluationReport, MetricError, ScoredVideo};
use crate::manifest::{Dataset, ManifestError};
use crate::model::{
    sample_frames, CaptionRecord, EmbeddingVector, ModelError, SampledSequence, ScoreLevel, ScoreSeries, TemporalWindow,
    VideoMeta,
};
use crate::refinement::{refine, softmax_weighted_mean, top_k_indices, RefinementError};
use crate::scoring::{assemble_initial_scores, score_text, ScoreElicitation};
use crate::summary::{build_windows, summarize, SummaryError, SummaryRecord};

/// Environment variable holding the bearer token sent to remote backends.
pub const TOKEN_ENV: &str = "LAVAD_BEARER_TOKEN";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot load mock fixture {path}: {message}")]
    Fixture { path: PathBuf, message: String },
    #[error("video `{video_id}`: {message}")]
    Video { video_id: String, message: String },
    #[error("stage {stage}: {failed} of {total} items failed (limit {limit})")]
    TooManyFailures {
        stage: Stage,
        failed: usize,
        total: usize,
        limit: f64,
    },
}

impl PipelineError {
    fn video(video_id: &str, message: impl ToString) -> Self {
        PipelineError::Video {
            video_id: video_id.to_string(),
            message: message.to_string(),
        }
    }
}

/// One sampled frame's caption from one source, or why there is none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRow {
    pub frame_index: usize,
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElicitationRow {
    pub frame_index: usize,
    #[serde(flatten)]
    pub elicitation: ScoreElicitation,
}

/// Final per-video output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScores {
    pub series: ScoreSeries,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Items attempted and failed in one stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCount {
    pub total: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats(pub BTreeMap<Stage, StageCount>);

impl StageStats {
    fn add(&mut self, stage: Stage, total: usize, failed: usize) {
        let c = self.0.entry(stage).or_default();
        c.total += total;
        c.failed += failed;
    }

    fn merge(&mut self, other: &StageStats) {
        for (&stage, c) in &other.0 {
            self.add(stage, c.total, c.failed);
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Recompute and overwrite completed stages.
    pub force: bool,
    /// Stop every video after this stage; no report is produced.
    pub stop_after: Option<Stage>,
    /// Report label; defaults to a summary of the settings.
    pub label: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: Option<EvaluationReport>,
    pub scores: Vec<VideoScores>,
    pub stats: StageStats,
    pub fingerprint: String,
}

/// Short description of the settings that shape the scores.
pub fn describe(cfg: &PipelineConfig) -> String {
    let b = |v: bool| if v { "T" } else { "F" };
    let mut parts = vec![format!(
        "K={} T={} N={} imp={} prior={} pool={}",
        cfg.neighbors,
        cfg.window_seconds,
        cfg.frames_per_window,
        b(cfg.impersonation),
        b(cfg.anomaly_prior),
        cfg.pooling
    )];
    for (on, name) in [
        (cfg.skip_cleaning, "no-clean"),
        (cfg.skip_summary, "no-summary"),
        (cfg.skip_refinement, "no-refine"),
    ] {
        if on {
            parts.push(name.to_string());
        }
    }
    parts.join(" ")
}

pub fn load_mock_fixture(path: &Path) -> Result<MockFixture, PipelineError> {
    let fail = |message: String| PipelineError::Fixture {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| fail(e.to_string()))?;
    toml::from_str(&text).map_err(|e| fail(e.to_string()))
}

/// Instantiates every configured backend. Mock endpoints share one fixture;
/// remote ones use the bearer token from [`TOKEN_ENV`], if set.
pub fn build_backends(cfg: &PipelineConfig) -> Result<BackendSet, PipelineError> {
    let fixture = Arc::new(match &cfg.mock_fixture {
        Some(p) => load_mock_fixture(p)?,
        None => MockFixture::default(),
    });
    let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
    let decoding = Decoding {
        temperature: cfg.temperature,
        max_tokens: cfg.max_tokens,
    };

    enum Built {
        Mock(Arc<MockBackend>),
        Http(Arc<HttpBackend>),
    }
    let make = |kind: BackendKind, d: crate::backends::BackendDescriptor| -> Result<Built, PipelineError> {
        debug_assert_eq!(d.kind, kind);
        Ok(if d.is_mock() {
            Built::Mock(Arc::new(MockBackend::new(d, fixture.clone())))
        } else {
            Built::Http(Arc::new(
                HttpBackend::connect(d, cfg.backend_retry, token.clone())?.with_decoding(decoding),
            ))
        })
    };
    macro_rules! as_dyn {
        ($built:expr, $tr:path) => {
            match $built {
                Built::Mock(m) => m as Arc<dyn $tr>,
                Built::Http(h) => h as Arc<dyn $tr>,
            }
        };
    }

    let mut captioners: Vec<Arc<dyn Captioner>> = Vec::new();
    let mut text = None;
    let mut image = None;
    let mut video = None;
    let mut llm = None;
    for (kind, d) in cfg.descriptors() {
        let built = make(kind, d)?;
        match kind {
            BackendKind::Captioner => captioners.push(as_dyn!(built, Captioner)),
            BackendKind::TextEncoder => text = Some(as_dyn!(built, TextEncoder)),
            BackendKind::ImageEncoder => image = Some(as_dyn!(built, ImageEncoder)),
            BackendKind::VideoEncoder => video = Some(as_dyn!(built, VideoEncoder)),
            BackendKind::Llm => llm = Some(as_dyn!(built, Llm)),
        }
    }
    let set = BackendSet {
        captioners,
        text_encoder: text.expect("configured"),
        image_encoder: image.expect("configured"),
        video_encoder: video.expect("configured"),
        llm: llm.expect("configured"),
    };
    set.validate()?;
    Ok(set)
}

/// Maps `f` over `items` on up to `threads` scoped threads. Results come
/// back in input order regardless of completion order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

struct Engine<'a> {
    dataset: &'a Dataset,
    cfg: &'a PipelineConfig,
    backends: &'a BackendSet,
    cache: StageCache,
    fps: Fingerprints,
    stop_after: Option<Stage>,
}

/// Outcome of one video: `None` scores when the run stopped early.
struct VideoRun {
    scores: Option<VideoScores>,
    stats: StageStats,
}

fn stops_at(stop: Option<Stage>, stage: Stage) -> bool {
    stop == Some(stage)
}

impl Engine<'_> {
    fn name(&self) -> &str {
        &self.dataset.manifest.dataset
    }

    fn captioner(&self, tag: &str) -> Result<&Arc<dyn Captioner>, PipelineError> {
        self.backends
            .captioners
            .iter()
            .find(|c| c.model_tag() == tag)
            .ok_or_else(|| PipelineError::Config(ConfigError::Invalid(format!("no captioner `{tag}`"))))
    }

    fn ns(&self, video_id: &str, stage: Stage, fp: &str) -> crate::cache::Namespace {
        self.cache.namespace(self.name(), video_id, stage, fp)
    }

    fn frames(&self, lattice: &SampledSequence) -> Vec<FrameRef> {
        lattice
            .indices
            .iter()
            .map(|&f| FrameRef {
                video_id: lattice.video_id.clone(),
                frame_index: f,
                uri: self.dataset.manifest.frame_uri(&lattice.video_id, f),
            })
            .collect()
    }

    fn captions(&self, frames: &[FrameRef], video_id: &str, stats: &mut StageStats) -> Result<Vec<CaptionRow>, PipelineError> {
        let mut all = Vec::new();
        for source in self.cfg.active_sources() {
            let fp = self.fps.captions_for(source).expect("fingerprinted source");
            let ns = self.ns(video_id, Stage::Captions, fp);
            let rows = match ns.load::<CaptionRow>()? {
                Some(rows) => rows,
                None => {
                    let captioner = self.captioner(source)?;
                    let rows = par_map(frames, self.cfg.frame_workers, |fr| {
                        let result = captioner
                            .caption(fr)
                            .map_err(|e| e.to_string())
                            .and_then(|t| {
                                CaptionRecord::new(video_id, fr.frame_index, source, &t)
                                    .map(|r| r.text)
                                    .map_err(|e| e.to_string())
                            });
                        match result {
                            Ok(text) => CaptionRow {
                                frame_index: fr.frame_index,
                                source_id: source.to_string(),
                                text: Some(text),
                                error: None,
                            },
                            Err(error) => {
                                log::warn!("caption {source} `{video_id}` frame {}: {error}", fr.frame_index);
                                CaptionRow {
                                    frame_index: fr.frame_index,
                                    source_id: source.to_string(),
                                    text: None,
                                    error: Some(error),
                                }
                            }
                        }
                    });
                    ns.store(&rows)?;
                    rows
                }
            };
            stats.add(Stage::Captions, rows.len(), rows.iter().filter(|r| r.text.is_none()).count());
            all.extend(rows);
        }
        Ok(all)
    }

    /// Embeds keyed items, reusing the namespace when complete. Missing
    /// keys in the result are failures.
    fn embeddings<T: Sync>(
        &self,
        video_id: &str,
        stage: Stage,
        fp: &str,
        items: &[(String, T)],
        embed: impl Fn(&T) -> Result<EmbeddingVector, BackendError> + Sync,
        stats: &mut StageStats,
    ) -> Result<HashMap<String, EmbeddingVector>, PipelineError> {
        let ns = self.ns(video_id, stage, fp);
        let entries = match ns.load_embeddings()? {
            Some(e) => e,
            None => {
                let results = par_map(items, self.cfg.frame_workers, |(key, item)| (key.clone(), embed(item)));
                let mut entries = Vec::new();
                for (key, r) in results {
                    match r {
                        Ok(v) => entries.push((key, v)),
                        Err(e) => log::warn!("{stage} `{video_id}` item {key:?}: {e}"),
                    }
                }
                ns.store_embeddings(self.backends.embed_dim(), &entries)?;
                entries
            }
        };
        stats.add(stage, items.len(), items.len().saturating_sub(entries.len()));
        Ok(entries.into_iter().collect())
    }

    fn cleaned(
        &self,
        lattice: &SampledSequence,
        frames: &[FrameRef],
        stats: &mut StageStats,
    ) -> Result<CleanedCaptions, PipelineError> {
        let vid = lattice.video_id.as_str();
        let rows = self.captions(frames, vid, stats)?;
        let records: Vec<CaptionRecord> = rows
            .iter()
            .filter_map(|r| {
                r.text.as_ref().map(|t| CaptionRecord {
                    video_id: vid.to_string(),
                    frame_index: r.frame_index,
                    source_id: r.source_id.clone(),
                    text: t.clone(),
                })
            })
            .collect();
        if records.is_empty() {
            return Err(PipelineError::video(vid, "no frame could be captioned"));
        }
        let ns = self.ns(vid, Stage::Cleaned, &self.fps.cleaned);

        if self.cfg.skip_cleaning {
            let cleaned = raw_captions(lattice, &records);
            if !ns.reusable() {
                ns.store(&cleaned.entries)?;
            }
            return Ok(cleaned);
        }

        let image_items: Vec<(String, &FrameRef)> = frames.iter().map(|f| (f.frame_index.to_string(), f)).collect();
        let image = self.embeddings(
            vid,
            Stage::ImageEmbeddings,
            &self.fps.image_embeddings,
            &image_items,
            |f| self.backends.image_encoder.embed_image(f),
            stats,
        )?;

        // Pool order: by frame, then by source as configured.
        let mut ordered = records;
        let order: Vec<&str> = self.cfg.active_sources();
        ordered.sort_by_key(|r| (r.frame_index, order.iter().position(|s| *s == r.source_id)));
        let mut texts: Vec<(String, String)> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for r in &ordered {
            if seen.insert(r.text.as_str()) {
                texts.push((r.text.clone(), r.text.clone()));
            }
        }
        let text_embeddings = self.embeddings(
            vid,
            Stage::PoolEmbeddings,
            &self.fps.pool_embeddings,
            &texts,
            |t| self.backends.text_encoder.embed_text(t),
            stats,
        )?;
        let shared: HashMap<&str, Arc<EmbeddingVector>> = text_embeddings
            .iter()
            .map(|(k, v)| (k.as_str(), Arc::new(v.clone())))
            .collect();
        let pool = CaptionPool::assemble(vid, ordered, |t| shared.get(t).cloned())
            .map_err(|e| PipelineError::video(vid, e))?;

        if let Some(entries) = ns.load::<CleanedCaption>()? {
            return Ok(CleanedCaptions {
                video_id: vid.to_string(),
                entries,
            });
        }
        let image_slots: Vec<Option<EmbeddingVector>> = lattice
            .indices
            .iter()
            .map(|f| image.get(&f.to_string()).cloned())
            .collect();
        let cleaned = clean_captions(lattice, &image_slots, &pool).map_err(|e| PipelineError::video(vid, e))?;
        ns.store(&cleaned.entries)?;
        Ok(cleaned)
    }

    fn summaries(
        &self,
        windows: &[TemporalWindow],
        cleaned: &CleanedCaptions,
        stats: &mut StageStats,
    ) -> Result<Vec<SummaryRecord>, PipelineError> {
        let fp = self.fps.summaries.as_deref().expect("summaries enabled");
        let ns = self.ns(&cleaned.video_id, Stage::Summaries, fp);
        let records = match ns.load::<SummaryRecord>()? {
            Some(r) => r,
            None => {
                let results = par_map(windows, self.cfg.frame_workers, |w| {
                    summarize(w, cleaned, self.backends.llm.as_ref(), self.cfg.retry_limit, self.cfg.dedupe_captions)
                });
                let records = results
                    .into_iter()
                    .collect::<Result<Vec<_>, SummaryError>>()
                    .map_err(|e| PipelineError::video(&cleaned.video_id, e))?;
                ns.store(&records)?;
                records
            }
        };
        stats.add(Stage::Summaries, records.len(), records.iter().filter(|r| !r.summarized).count());
        Ok(records)
    }

    fn elicitations(
        &self,
        video_id: &str,
        lattice: &SampledSequence,
        subjects: &[String],
        stats: &mut StageStats,
    ) -> Result<Vec<ElicitationRow>, PipelineError> {
        let ns = self.ns(video_id, Stage::Elicitations, &self.fps.elicitations);
        let rows = match ns.load::<ElicitationRow>()? {
            Some(r) => r,
            None => {
                let context = self.cfg.prompt_variant().render();
                let items: Vec<(usize, &String)> = lattice.indices.iter().copied().zip(subjects).collect();
                let rows = par_map(&items, self.cfg.frame_workers, |(f, s)| ElicitationRow {
                    frame_index: *f,
                    elicitation: score_text(s, &context, self.backends.llm.as_ref(), self.cfg.retry_limit),
                });
                ns.store(&rows)?;
                rows
            }
        };
        stats.add(
            Stage::Elicitations,
            rows.len(),
            rows.iter().filter(|r| r.elicitation.parsed.is_none()).count(),
        );
        Ok(rows)
    }

    fn run_video(&self, meta: &VideoMeta) -> Result<VideoRun, PipelineError> {
        let vid = meta.video_id.as_str();
        let mut stats = StageStats::default();
        let lattice = sample_frames(meta, self.cfg.stride());
        let frames = self.frames(&lattice);
        let stopped = |stats: StageStats| Ok(VideoRun { scores: None, stats });

        let cleaned = self.cleaned(&lattice, &frames, &mut stats)?;
        if stops_at(self.stop_after, Stage::Cleaned) {
            return stopped(stats);
        }
        let windows = build_windows(meta, &lattice, self.cfg.window_seconds, self.cfg.frames_per_window);
        let mut flags = Vec::new();
        let uncleaned = cleaned.entries.iter().filter(|c| !c.cleaned).count();
        if !self.cfg.skip_cleaning && uncleaned > 0 {
            flags.push(format!("uncleaned_frames={uncleaned}"));
        }

        let subjects: Vec<String> = if self.cfg.skip_summary {
            cleaned.entries.iter().map(|c| c.caption.text.clone()).collect()
        } else {
            let summaries = self.summaries(&windows, &cleaned, &mut stats)?;
            let unsummarized = summaries.iter().filter(|s| !s.summarized).count();
            if unsummarized > 0 {
                flags.push(format!("unsummarized_windows={unsummarized}"));
            }
            summaries.into_iter().map(|s| s.text).collect()
        };
        if stops_at(self.stop_after, Stage::Summaries) {
            return stopped(stats);
        }

        let rows = self.elicitations(vid, &lattice, &subjects, &mut stats)?;
        let parsed: Vec<_> = rows.iter().map(|r| r.elicitation.parsed).collect();
        let initial = assemble_initial_scores(vid, &lattice.indices, &parsed);
        if initial.all_failed {
            flags.push("all_scores_failed".into());
        } else if !initial.imputed.is_empty() {
            flags.push(format!("imputed_scores={}", initial.imputed.len()));
        }
        if stops_at(self.stop_after, Stage::Elicitations) {
            return stopped(stats);
        }

        let scores_ns = self.ns(vid, Stage::Scores, &self.fps.scores);
        let mut series = initial.series;
        if !self.cfg.skip_refinement {
            let subject_items: Vec<(String, &String)> = lattice
                .indices
                .iter()
                .map(|f| f.to_string())
                .zip(&subjects)
                .collect();
            let summary_emb = self.embeddings(
                vid,
                Stage::SubjectEmbeddings,
                self.fps.subject_embeddings.as_deref().expect("refinement enabled"),
                &subject_items,
                |s| self.backends.text_encoder.embed_text(s),
                &mut stats,
            )?;
            let root = self.dataset.manifest.snippet_root(vid);
            let snippet_items: Vec<(String, SnippetRef)> = windows
                .iter()
                .map(|w| {
                    (
                        w.center_frame.to_string(),
                        SnippetRef {
                            video_id: vid.to_string(),
                            root_uri: root.clone(),
                            window: w.clone(),
                        },
                    )
                })
                .collect();
            let snippet_emb = self.embeddings(
                vid,
                Stage::SnippetEmbeddings,
                self.fps.snippet_embeddings.as_deref().expect("refinement enabled"),
                &snippet_items,
                |s| self.backends.video_encoder.embed_video(s),
                &mut stats,
            )?;
            let lookup = |m: &HashMap<String, EmbeddingVector>| -> Vec<Option<EmbeddingVector>> {
                lattice.indices.iter().map(|f| m.get(&f.to_string()).cloned()).collect()
            };
            let (refined, unrefined) = refine_partial(
                &lookup(&snippet_emb),
                &lookup(&summary_emb),
                &series.initial_values(),
                self.cfg.neighbors,
            )
            .map_err(|e| PipelineError::video(vid, e))?;
            if unrefined > 0 {
                flags.push(format!("unrefined_frames={unrefined}"));
            }
            series.refined = Some(refined);
        }
        series.validate()?;
        let scores = VideoScores { series, flags };
        if !scores_ns.reusable() {
            scores_ns.store(std::slice::from_ref(&scores))?;
        }
        Ok(VideoRun {
            scores: Some(scores),
            stats,
        })
    }
}

/// Refinement that tolerates missing embeddings: a frame without a snippet
/// embedding keeps its initial score, and summaries without an embedding
/// are not candidates. Returns the scores and the number of unrefined
/// frames.
pub fn refine_partial(
    snippets: &[Option<EmbeddingVector>],
    summaries: &[Option<EmbeddingVector>],
    initial: &[f64],
    k: usize,
) -> Result<(Vec<f64>, usize), RefinementError> {
    if snippets.iter().chain(summaries).all(Option::is_some) {
        let s: Vec<EmbeddingVector> = snippets.iter().flatten().cloned().collect();
        let m: Vec<EmbeddingVector> = summaries.iter().flatten().cloned().collect();
        return Ok((refine(&s, &m, initial, k)?, 0));
    }
    if k == 0 {
        return Err(RefinementError::ZeroK);
    }
    let candidates: Vec<usize> = (0..summaries.len()).filter(|&j| summaries[j].is_some()).collect();
    let mut unrefined = 0;
    let out = (0..initial.len())
        .map(|i| match &snippets[i] {
            Some(v) if !candidates.is_empty() => {
                let sims: Vec<f64> = candidates
                    .iter()
                    .map(|&j| v.dot(summaries[j].as_ref().expect("candidate")))
                    .collect();
                softmax_weighted_mean(
                    top_k_indices(&sims, k)
                        .into_iter()
                        .map(|c| (sims[c], initial[candidates[c]])),
                )
            }
            _ => {
                unrefined += 1;
                initial[i]
            }
        })
        .collect();
    Ok((out, unrefined))
}

/// Every lattice frame takes its primary-source caption; frames without
/// one borrow the nearest captioned frame's (earlier on ties).
fn raw_captions(lattice: &SampledSequence, records: &[CaptionRecord]) -> CleanedCaptions {
    let first_source = records.first().map(|r| r.source_id.clone()).unwrap_or_default();
    let primary: BTreeMap<usize, &CaptionRecord> = records
        .iter()
        .filter(|r| r.source_id == first_source)
        .map(|r| (r.frame_index, r))
        .collect();
    let entries = lattice
        .indices
        .iter()
        .map(|&f| {
            let own = primary.get(&f);
            let chosen = own.copied().unwrap_or_else(|| {
                records
                    .iter()
                    .min_by_key(|r| (r.frame_index.abs_diff(f), r.frame_index))
                    .expect("non-empty records")
            });
            CleanedCaption {
                frame_index: f,
                caption: chosen.clone(),
                similarity: None,
                cleaned: false,
            }
        })
        .collect();
    CleanedCaptions {
        video_id: lattice.video_id.clone(),
        entries,
    }
}

/// Runs every stage for every video of `dataset`, then evaluates.
pub fn run_stages(
    dataset: &Dataset,
    cfg: &PipelineConfig,
    backends: &BackendSet,
    options: &RunOptions,
) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    backends.validate()?;
    let engine = Engine {
        dataset,
        cfg,
        backends,
        cache: StageCache::new(&cfg.cache_dir, options.force),
        fps: cfg.fingerprints(),
        stop_after: options.stop_after,
    };
    let videos = &dataset.manifest.videos;
    let results = par_map(videos, cfg.workers, |meta| engine.run_video(meta));
    let (scores, stats) = collect_runs(videos, results, cfg.max_failure_fraction)?;

    let fingerprint = engine.fps.run.clone();
    if options.stop_after.is_some() {
        return Ok(RunOutcome {
            report: None,
            scores,
            stats,
            fingerprint,
        });
    }
    let label = options.label.clone().unwrap_or_else(|| describe(cfg));
    let report = report_for(dataset, cfg, &scores, &label, &fingerprint)?;
    Ok(RunOutcome {
        report: Some(report),
        scores,
        stats,
        fingerprint,
    })
}

/// Merges per-video results, dropping failed videos, and enforces the
/// failure limit on videos and on every stage.
fn collect_runs(
    videos: &[VideoMeta],
    results: Vec<Result<VideoRun, PipelineError>>,
    limit: f64,
) -> Result<(Vec<VideoScores>, StageStats), PipelineError> {
    let mut stats = StageStats::default();
    let mut scores = Vec::new();
    let mut failed_videos = Vec::new();
    for (meta, r) in videos.iter().zip(results) {
        match r {
            Ok(run) => {
                stats.merge(&run.stats);
                scores.extend(run.scores);
            }
            Err(PipelineError::Video { message, .. }) => {
                log::warn!("video `{}` failed: {message}", meta.video_id);
                failed_videos.push(meta.video_id.clone());
            }
            Err(e) => return Err(e),
        }
    }

    let exceeds = |c: &StageCount| c.total > 0 && c.failed as f64 > limit * c.total as f64;
    let video_count = StageCount {
        total: videos.len(),
        failed: failed_videos.len(),
    };
    if exceeds(&video_count) {
        return Err(PipelineError::TooManyFailures {
            stage: Stage::Scores,
            failed: video_count.failed,
            total: video_count.total,
            limit,
        });
    }
    if let Some((&stage, c)) = stats.0.iter().find(|(_, c)| exceeds(c)) {
        return Err(PipelineError::TooManyFailures {
            stage,
            failed: c.failed,
            total: c.total,
            limit,
        });
    }
    Ok((scores, stats))
}

fn report_for(
    dataset: &Dataset,
    cfg: &PipelineConfig,
    scores: &[VideoScores],
    label: &str,
    fingerprint: &str,
) -> Result<EvaluationReport, PipelineError> {
    let metas: BTreeMap<&str, &VideoMeta> = dataset
        .manifest
        .videos
        .iter()
        .map(|v| (v.video_id.as_str(), v))
        .collect();
    let scored: Vec<ScoredVideo<'_>> = scores
        .iter()
        .map(|s| ScoredVideo {
            meta: metas[s.series.video_id.as_str()],
            series: &s.series,
            truth: &dataset.truth[&s.series.video_id],
            flags: s.flags.clone(),
        })
        .collect();
    Ok(evaluate(&dataset.manifest.dataset, label, fingerprint, &scored, cfg.expansion)?)
}

/// Full run producing the evaluation report.
pub fn run_pipeline(
    dataset: &Dataset,
    cfg: &PipelineConfig,
    backends: &BackendSet,
    force: bool,
) -> Result<EvaluationReport, PipelineError> {
    let outcome = run_stages(
        dataset,
        cfg,
        backends,
        &RunOptions {
            force,
            ..RunOptions::default()
        },
    )?;
    Ok(outcome.report.expect("full runs always report"))
}

/// Which embedding the zero-shot baseline compares with the prompt pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZsModality {
    /// The sampled frame itself.
    Image,
    /// The snippet spanning the frame's temporal window.
    Video,
}

impl fmt::Display for ZsModality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ZsModality::Image => "image",
            ZsModality::Video => "video",
        })
    }
}

impl FromStr for ZsModality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "image" => Ok(ZsModality::Image),
            "video" => Ok(ZsModality::Video),
            other => Err(format!("unknown modality `{other}` (expected image or video)")),
        }
    }
}

impl Engine<'_> {
    fn zs_video(
        &self,
        meta: &VideoMeta,
        pair: &PromptPair,
        modality: ZsModality,
        fp: &str,
    ) -> Result<VideoRun, PipelineError> {
        let vid = meta.video_id.as_str();
        let mut stats = StageStats::default();
        let lattice = sample_frames(meta, self.cfg.stride());
        let keys: Vec<String> = lattice.indices.iter().map(|f| f.to_string()).collect();
        let embedded = match modality {
            ZsModality::Image => {
                let frames = self.frames(&lattice);
                let items: Vec<(String, &FrameRef)> = keys.iter().cloned().zip(&frames).collect();
                self.embeddings(vid, Stage::ImageEmbeddings, fp, &items, |f| self.backends.image_encoder.embed_image(f), &mut stats)?
            }
            ZsModality::Video => {
                let root = self.dataset.manifest.snippet_root(vid);
                let items: Vec<(String, SnippetRef)> = build_windows(meta, &lattice, self.cfg.window_seconds, self.cfg.frames_per_window)
                    .into_iter()
                    .map(|window| {
                        (
                            window.center_frame.to_string(),
                            SnippetRef {
                                video_id: vid.to_string(),
                                root_uri: root.clone(),
                                window,
                            },
                        )
                    })
                    .collect();
                self.embeddings(vid, Stage::SnippetEmbeddings, fp, &items, |s| self.backends.video_encoder.embed_video(s), &mut stats)?
            }
        };
        let mut scores = Vec::with_capacity(keys.len());
        for key in &keys {
            scores.push(match embedded.get(key) {
                Some(e) => Some(zs_two_prompt_score(e, pair).map_err(|e| PipelineError::video(vid, e))?),
                None => None,
            });
        }
        let known: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].is_some()).collect();
        if known.is_empty() {
            return Err(PipelineError::video(vid, format!("no {modality} embedding available")));
        }
        let mut flags = Vec::new();
        let missing = scores.len() - known.len();
        if missing > 0 {
            flags.push(format!("imputed_scores={missing}"));
        }
        // Missing positions take the nearest available score, earlier first.
        let refined: Vec<f64> = (0..scores.len())
            .map(|i| {
                scores[i].unwrap_or_else(|| {
                    let j = *known.iter().min_by_key(|&&j| (i.abs_diff(j), j)).expect("non-empty");
                    scores[j].expect("known")
                })
            })
            .collect();
        let series = ScoreSeries {
            video_id: vid.to_string(),
            frame_indices: lattice.indices.clone(),
            initial: refined.iter().map(|&s| ScoreLevel::snap(s).expect("finite")).collect(),
            refined: Some(refined),
        };
        series.validate()?;
        Ok(VideoRun {
            scores: Some(VideoScores { series, flags }),
            stats,
        })
    }
}

/// Zero-shot two-prompt baseline: every lattice frame is scored by the
/// softmax of its similarities to the standard prompt pair. The exact
/// scores go in `refined`; `initial` holds them snapped to the level grid.
/// Embeddings are read from and written to the pipeline's stage caches.
pub fn run_zs_baseline(
    dataset: &Dataset,
    cfg: &PipelineConfig,
    backends: &BackendSet,
    modality: ZsModality,
    force: bool,
) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    backends.validate()?;
    let pair = PromptPair::standard(backends.text_encoder.as_ref())?;
    let (embedding_fp, fingerprint) = cfg.zs_fingerprints(modality == ZsModality::Video);
    let engine = Engine {
        dataset,
        cfg,
        backends,
        cache: StageCache::new(&cfg.cache_dir, force),
        fps: cfg.fingerprints(),
        stop_after: None,
    };
    let videos = &dataset.manifest.videos;
    let results = par_map(videos, cfg.workers, |meta| engine.zs_video(meta, &pair, modality, &embedding_fp));
    let (scores, stats) = collect_runs(videos, results, cfg.max_failure_fraction)?;
    let report = report_for(dataset, cfg, &scores, &format!("zs-{modality}"), &fingerprint)?;
    Ok(RunOutcome {
        report: Some(report),
        scores,
        stats,
        fingerprint,
    })
}
