use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use lavad_core::backends::{BackendKind, BackendSet, Captioner, ImageEncoder, Llm, MockBackend, TextEncoder, VideoEncoder};
use lavad_core::config::{PipelineConfig, Stage};
use lavad_core::fixture::load_planted;
use lavad_core::manifest::Dataset;
use lavad_core::pipeline::{
    load_mock_fixture, run_pipeline, run_stages, run_zs_baseline, RunOptions, VideoScores, ZsModality,
};
use lavad_core::sweep::{ablation_sweep, SweepAxis};

/// Mock backends whose call counters stay visible to the test.
struct Counted {
    set: BackendSet,
    captioners: Vec<Arc<MockBackend>>,
    image: Arc<MockBackend>,
    text: Arc<MockBackend>,
    video: Arc<MockBackend>,
    llm: Arc<MockBackend>,
}

impl Counted {
    fn new(cfg: &PipelineConfig) -> Self {
        let fixture = Arc::new(load_mock_fixture(cfg.mock_fixture.as_ref().unwrap()).unwrap());
        let mut captioners = Vec::new();
        let mut by_kind = BTreeMap::new();
        for (kind, d) in cfg.descriptors() {
            let m = Arc::new(MockBackend::new(d, fixture.clone()));
            if kind == BackendKind::Captioner {
                captioners.push(m);
            } else {
                by_kind.insert(kind.to_string(), m);
            }
        }
        let get = |k: BackendKind| by_kind[&k.to_string()].clone();
        let (text, image, video, llm) = (
            get(BackendKind::TextEncoder),
            get(BackendKind::ImageEncoder),
            get(BackendKind::VideoEncoder),
            get(BackendKind::Llm),
        );
        let set = BackendSet {
            captioners: captioners.iter().map(|c| c.clone() as Arc<dyn Captioner>).collect(),
            text_encoder: text.clone() as Arc<dyn TextEncoder>,
            image_encoder: image.clone() as Arc<dyn ImageEncoder>,
            video_encoder: video.clone() as Arc<dyn VideoEncoder>,
            llm: llm.clone() as Arc<dyn Llm>,
        };
        Self {
            set,
            captioners,
            image,
            text,
            video,
            llm,
        }
    }

    fn caption_calls(&self) -> u64 {
        self.captioners.iter().map(|c| c.calls()).sum()
    }

    fn total_calls(&self) -> u64 {
        self.caption_calls() + self.image.calls() + self.text.calls() + self.video.calls() + self.llm.calls()
    }
}

fn planted(cache: &Path) -> (Dataset, PipelineConfig) {
    load_planted(cache).expect("fixture loads")
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

const LATTICE_FRAMES: u64 = 30 + 25 + 40;

#[test]
fn planted_fixture_is_deterministic_and_separates() {
    let start = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (dataset, cfg_a) = planted(a.path());
    let (_, cfg_b) = planted(b.path());
    let ra = run_pipeline(&dataset, &cfg_a, &Counted::new(&cfg_a).set, false).unwrap();
    let rb = run_pipeline(&dataset, &cfg_b, &Counted::new(&cfg_b).set, false).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
    assert_eq!(ra.roc_auc, Some(1.0));
    assert_eq!(ra.average_precision, Some(1.0));
    assert_eq!(ra.num_videos, 3);
    assert_eq!(ra.num_frames, 480 + 400 + 640);
    assert_eq!(ra.positive_frames, 472 - 233 + 1);
    assert!(start.elapsed().as_secs() < 30);
}

#[test]
fn rerun_is_a_cache_read() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, cfg) = planted(dir.path());
    let first = run_pipeline(&dataset, &cfg, &Counted::new(&cfg).set, false).unwrap();
    let before = snapshot(dir.path());
    let again = Counted::new(&cfg);
    let second = run_pipeline(&dataset, &cfg, &again.set, false).unwrap();
    assert_eq!(again.total_calls(), 0);
    assert_eq!(first, second);
    assert_eq!(before, snapshot(dir.path()));

    let forced = Counted::new(&cfg);
    let third = run_pipeline(&dataset, &cfg, &forced.set, true).unwrap();
    assert!(forced.caption_calls() > 0);
    assert_eq!(third, first);
    assert_eq!(before, snapshot(dir.path()));
}

#[test]
fn resume_after_summaries_runs_only_scoring_onward() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, cfg) = planted(dir.path());
    let partial = Counted::new(&cfg);
    let outcome = run_stages(
        &dataset,
        &cfg,
        &partial.set,
        &RunOptions {
            stop_after: Some(Stage::Summaries),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(outcome.report.is_none());
    assert_eq!(partial.llm.calls(), LATTICE_FRAMES, "one summary per window");
    assert_eq!(partial.video.calls(), 0);

    let resumed = Counted::new(&cfg);
    let report = run_pipeline(&dataset, &cfg, &resumed.set, false).unwrap();
    assert_eq!(resumed.caption_calls(), 0);
    assert_eq!(resumed.image.calls(), 0);
    assert_eq!(resumed.llm.calls(), LATTICE_FRAMES, "one score per window, no summaries");
    assert_eq!(resumed.video.calls(), LATTICE_FRAMES);

    let fresh_dir = tempfile::tempdir().unwrap();
    let (_, fresh_cfg) = planted(fresh_dir.path());
    let fresh = run_pipeline(&dataset, &fresh_cfg, &Counted::new(&fresh_cfg).set, false).unwrap();
    assert_eq!(report, fresh);
    assert_eq!(snapshot(dir.path()), snapshot(fresh_dir.path()));
}

#[test]
fn incomplete_namespace_is_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, cfg) = planted(dir.path());
    let first = run_pipeline(&dataset, &cfg, &Counted::new(&cfg).set, false).unwrap();
    let fps = cfg.fingerprints();
    let ns = dir
        .path()
        .join("planted")
        .join("elicitations")
        .join(&fps.elicitations);
    std::fs::remove_file(ns.join("Robbery_001.done")).unwrap();
    std::fs::remove_file(dir.path().join("planted/scores").join(&fps.scores).join("Robbery_001.done")).unwrap();
    // simulate a torn write
    let records = ns.join("Robbery_001.jsonl");
    let text = std::fs::read_to_string(&records).unwrap();
    std::fs::write(&records, &text[..text.len() / 2]).unwrap();

    let again = Counted::new(&cfg);
    let second = run_pipeline(&dataset, &cfg, &again.set, false).unwrap();
    assert_eq!(again.llm.calls(), 40);
    assert_eq!(again.caption_calls(), 0);
    assert_eq!(first, second);
}

#[test]
fn skip_cleaning_summarizes_raw_captions() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, mut cfg) = planted(dir.path());
    cfg.skip_cleaning = true;
    let counted = Counted::new(&cfg);
    run_pipeline(&dataset, &cfg, &counted.set, false).unwrap();
    assert_eq!(counted.image.calls(), 0, "no cleaning, no image embeddings");
    assert_eq!(counted.captioners[0].calls(), LATTICE_FRAMES);
    assert_eq!(counted.captioners[1].calls() + counted.captioners[2].calls(), 0);

    let fps = cfg.fingerprints();
    let summaries = std::fs::read_to_string(
        dir.path()
            .join("planted/summaries")
            .join(fps.summaries.unwrap())
            .join("Robbery_001.jsonl"),
    )
    .unwrap();
    // the primary captioner's hallucination reaches the summaries
    assert!(summaries.contains("a blurry photo of an empty room"));

    let full_dir = tempfile::tempdir().unwrap();
    let (_, full_cfg) = planted(full_dir.path());
    run_pipeline(&dataset, &full_cfg, &Counted::new(&full_cfg).set, false).unwrap();
    let full_fps = full_cfg.fingerprints();
    let cleaned = std::fs::read_to_string(
        full_dir
            .path()
            .join("planted/summaries")
            .join(full_fps.summaries.unwrap())
            .join("Robbery_001.jsonl"),
    )
    .unwrap();
    assert!(!cleaned.contains("a blurry photo"));
}

#[test]
fn skip_summary_and_skip_refinement_paths() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, mut cfg) = planted(dir.path());
    cfg.skip_summary = true;
    let counted = Counted::new(&cfg);
    let report = run_pipeline(&dataset, &cfg, &counted.set, false).unwrap();
    assert_eq!(counted.llm.calls(), LATTICE_FRAMES, "only scoring prompts");
    assert!(!dir.path().join("planted/summaries").exists());
    assert_eq!(report.roc_auc, Some(1.0));

    let (_, mut raw) = planted(dir.path());
    raw.skip_refinement = true;
    let counted = Counted::new(&raw);
    let outcome = run_stages(&dataset, &raw, &counted.set, &RunOptions::default()).unwrap();
    assert_eq!(counted.video.calls(), 0);
    for VideoScores { series, .. } in &outcome.scores {
        assert!(series.refined.is_none());
    }
    let report = outcome.report.unwrap();
    let robbery = report.videos.iter().find(|v| v.video_id == "Robbery_001").unwrap();
    assert!(robbery.scores.iter().all(|&s| s == 0.1 || s == 0.9));
}

#[test]
fn sweeps_emit_expected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, cfg) = planted(dir.path());
    let counted = Counted::new(&cfg);
    for (axis, rows) in [
        (SweepAxis::Components, vec!["skip-cleaning", "skip-summary", "skip-refinement", "full"]),
        (
            SweepAxis::Prompt,
            vec![
                "impersonation=off anomaly_prior=off",
                "impersonation=off anomaly_prior=on",
                "impersonation=on anomaly_prior=off",
                "impersonation=on anomaly_prior=on",
            ],
        ),
        (
            SweepAxis::Tn,
            vec!["T=2.5 N=10", "T=5 N=10", "T=10 N=10", "T=20 N=10", "T=10 N=5", "T=10 N=20"],
        ),
        (SweepAxis::K, vec!["K=1", "K=3", "K=5", "K=7", "K=9", "K=10"]),
    ] {
        let table = ablation_sweep(&dataset, &cfg, &counted.set, axis, false).unwrap();
        let labels: Vec<&str> = table.reports.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, rows, "{axis}");
        let fps: std::collections::BTreeSet<&str> = table.reports.iter().map(|r| r.fingerprint.as_str()).collect();
        assert_eq!(fps.len(), rows.len());
        for r in &table.reports {
            assert_eq!(r.num_videos, 3);
            assert!(r.roc_auc.unwrap() >= 0.0 && r.roc_auc.unwrap() <= 1.0);
        }
    }
    // Captions are shared across every sweep: each source ran once per frame.
    for c in &counted.captioners {
        assert!(c.calls() <= LATTICE_FRAMES, "{} calls", c.calls());
    }
}

#[test]
fn missing_captions_are_tolerated_within_limit() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, mut cfg) = planted(dir.path());
    let mut fixture = load_mock_fixture(cfg.mock_fixture.as_ref().unwrap()).unwrap();
    fixture.caption_failures.push(lavad_core::backends::mock::FrameFailure {
        source: None,
        video_id: "Robbery_001".into(),
        frame_index: 256,
    });
    let path = dir.path().join("mock.toml");
    std::fs::write(&path, toml_string(&fixture)).unwrap();
    cfg.mock_fixture = Some(path);
    let report = run_pipeline(&dataset, &cfg, &Counted::new(&cfg).set, false).unwrap();
    assert_eq!(report.roc_auc, Some(1.0));

    cfg.max_failure_fraction = 0.0;
    cfg.cache_dir = dir.path().join("strict");
    let err = run_pipeline(&dataset, &cfg, &Counted::new(&cfg).set, false).unwrap_err();
    assert!(err.to_string().contains("captions"), "{err}");
}

fn toml_string(f: &lavad_core::backends::MockFixture) -> String {
    toml::to_string(f).unwrap()
}

#[test]
fn zero_shot_baselines_share_embedding_caches() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, cfg) = planted(dir.path());
    run_pipeline(&dataset, &cfg, &Counted::new(&cfg).set, false).unwrap();

    // Frame and snippet embeddings are already cached by the full run; only
    // the two prompts need embedding.
    let c = Counted::new(&cfg);
    let image = run_zs_baseline(&dataset, &cfg, &c.set, ZsModality::Image, false).unwrap();
    let video = run_zs_baseline(&dataset, &cfg, &c.set, ZsModality::Video, false).unwrap();
    assert_eq!(c.image.calls() + c.video.calls() + c.llm.calls() + c.caption_calls(), 0);
    assert_eq!(c.text.calls(), 4);

    for outcome in [&image, &video] {
        let report = outcome.report.as_ref().unwrap();
        assert_eq!(report.num_videos, 3);
        assert!(report.roc_auc.is_some());
        for s in &outcome.scores {
            let refined = s.series.refined.as_ref().unwrap();
            assert_eq!(refined.len(), s.series.frame_indices.len());
            assert!(refined.iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }
    assert_eq!(image.report.as_ref().unwrap().label, "zs-image");
    assert_ne!(image.fingerprint, video.fingerprint);
    assert_ne!(image.fingerprint, cfg.fingerprint());

    let fresh = tempfile::tempdir().unwrap();
    let (_, cfg2) = planted(fresh.path());
    let c2 = Counted::new(&cfg2);
    let again = run_zs_baseline(&dataset, &cfg2, &c2.set, ZsModality::Image, false).unwrap();
    assert_eq!(c2.image.calls(), 480 / 16 + 400 / 16 + 640 / 16);
    assert_eq!(again.report, image.report);
}
