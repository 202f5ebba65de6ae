//! Acceptance suite: one line per criterion, then a single verdict.
//!
//! Runs without the libtest harness so the report is always printed:
//! `cargo test -p lavad-core --test acceptance`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use lavad_core::baselines::{zs_two_prompt_score, PromptPair};
use lavad_core::cleaning::{clean_captions, CaptionPool, PoolEntry};
use lavad_core::evaluation::{average_precision, render_table, roc_auc};
use lavad_core::fixture::load_planted;
use lavad_core::model::{CaptionRecord, EmbeddingVector, SampledSequence, ScoreLevel};
use lavad_core::pipeline::{build_backends, run_pipeline};
use lavad_core::refinement::{refine, softmax_weighted_mean, RefinementInputs};
use lavad_core::scoring::{assemble_initial_scores, parse_score};
use lavad_core::sweep::{ablation_sweep, SweepAxis};

const SEED: u64 = 0x1A7AD;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- helpers

fn random_unit(rng: &mut StdRng, dim: usize, coarse: bool) -> EmbeddingVector {
    loop {
        let v: Vec<f32> = (0..dim)
            .map(|_| {
                if coarse {
                    rng.gen_range(-2i8..=2) as f32
                } else {
                    rng.gen_range(-1.0f32..1.0)
                }
            })
            .collect();
        if v.iter().any(|&x| x != 0.0) {
            return EmbeddingVector::normalized(v).unwrap();
        }
    }
}

fn lattice(n: usize) -> SampledSequence {
    SampledSequence {
        video_id: "v".into(),
        stride: 16,
        indices: (0..n).map(|i| i * 16).collect(),
    }
}

fn record(frame: usize, source: &str, text: &str) -> CaptionRecord {
    CaptionRecord {
        video_id: "v".into(),
        frame_index: frame,
        source_id: source.into(),
        text: text.into(),
    }
}

/// A caption pool over `frames` lattice frames; coarse embeddings make
/// exact similarity ties common.
fn random_pool(rng: &mut StdRng, frames: usize, dim: usize, coarse: bool) -> Vec<PoolEntry> {
    let mut entries = Vec::new();
    for f in 0..frames {
        for s in 0..rng.gen_range(1..=3) {
            entries.push(PoolEntry {
                caption: record(f * 16, &format!("src{s}"), &format!("caption {}", rng.gen_range(0..6))),
                embedding: Arc::new(random_unit(rng, dim, coarse)),
            });
        }
    }
    entries
}

fn random_scores(rng: &mut StdRng, n: usize) -> Vec<f64> {
    let tied = rng.gen_bool(0.5);
    (0..n)
        .map(|_| {
            if tied {
                rng.gen_range(0..=10) as f64 / 10.0
            } else {
                rng.gen::<f64>()
            }
        })
        .collect()
}

fn random_labels(rng: &mut StdRng, n: usize) -> Vec<bool> {
    loop {
        let l: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        if l.iter().any(|&x| x) && l.iter().any(|&x| !x) {
            return l;
        }
    }
}

fn levels(rng: &mut StdRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(0..=10) as f64 / 10.0).collect()
}

// ---------------------------------------------------------------- oracles

/// Exhaustive argmax: highest dot product, ties to the smallest
/// (frame, source, text).
fn oracle_best(pool: &[PoolEntry], query: &EmbeddingVector) -> CaptionRecord {
    let dot = |e: &PoolEntry| -> f64 {
        e.embedding
            .values()
            .iter()
            .zip(query.values())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    };
    let max = pool.iter().map(dot).fold(f64::NEG_INFINITY, f64::max);
    pool.iter()
        .filter(|e| dot(e) == max)
        .map(|e| e.caption.clone())
        .min_by(|a, b| {
            (a.frame_index, &a.source_id, &a.text).cmp(&(b.frame_index, &b.source_id, &b.text))
        })
        .unwrap()
}

/// Refinement by rank counting and an unshifted softmax.
fn oracle_refine(snips: &[EmbeddingVector], sums: &[EmbeddingVector], initial: &[f64], k: usize) -> Vec<f64> {
    let dot = |a: &EmbeddingVector, b: &EmbeddingVector| -> f64 {
        a.values().iter().zip(b.values()).map(|(&x, &y)| x as f64 * y as f64).sum()
    };
    (0..snips.len())
        .map(|i| {
            let sims: Vec<f64> = sums.iter().map(|s| dot(&snips[i], s)).collect();
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..sims.len() {
                let rank = (0..sims.len())
                    .filter(|&o| sims[o] > sims[j] || (sims[o] == sims[j] && o < j))
                    .count();
                if rank < k {
                    num += sims[j].exp() * initial[j];
                    den += sims[j].exp();
                }
            }
            num / den
        })
        .collect()
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
fn oracle_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    credit += 1.0;
                } else if scores[i] == scores[j] {
                    credit += 0.5;
                }
            }
        }
    }
    credit / pairs
}

/// Mean precision at each positive's rank, ranks fixed by descending score
/// and then by index.
fn oracle_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    let rank = |i: usize| {
        1 + (0..n)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
    };
    let ranks: Vec<usize> = (0..n).map(rank).collect();
    let positives: Vec<usize> = (0..n).filter(|&i| labels[i]).collect();
    positives
        .iter()
        .map(|&i| {
            let hits = positives.iter().filter(|&&p| ranks[p] <= ranks[i]).count();
            hits as f64 / ranks[i] as f64
        })
        .sum::<f64>()
        / positives.len() as f64
}

// ---------------------------------------------------------------- criteria

fn equation_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = StdRng::seed_from_u64(SEED);
    let instances = 120;
    let mut worst_refine = 0.0f64;
    let mut worst_metric = 0.0f64;
    for case in 0..instances {
        let frames = rng.gen_range(1..=200);
        let dim = rng.gen_range(2..=32);
        let coarse = case % 2 == 0;

        let entries = random_pool(&mut rng, frames.min(60), dim, coarse);
        let pool = CaptionPool::from_entries("v", entries.clone()).unwrap();
        for _ in 0..20 {
            let q = random_unit(&mut rng, dim, coarse);
            let (got, _) = pool.best_match(&q).unwrap();
            let want = oracle_best(&entries, &q);
            ensure(got.caption == want, || format!("argmax case {case}: {:?} vs {want:?}", got.caption))?;
        }

        let snips: Vec<_> = (0..frames).map(|_| random_unit(&mut rng, dim, coarse)).collect();
        let sums: Vec<_> = (0..frames).map(|_| random_unit(&mut rng, dim, coarse)).collect();
        let initial = levels(&mut rng, frames);
        let k = rng.gen_range(1..=frames + 2);
        let got = refine(&snips, &sums, &initial, k).unwrap();
        let want = oracle_refine(&snips, &sums, &initial, k);
        for (g, w) in got.iter().zip(&want) {
            worst_refine = worst_refine.max((g - w).abs());
        }

        let n = rng.gen_range(2..=200);
        let scores = random_scores(&mut rng, n);
        let labels = random_labels(&mut rng, n);
        worst_metric = worst_metric
            .max((roc_auc(&scores, &labels).unwrap() - oracle_auc(&scores, &labels)).abs())
            .max((average_precision(&scores, &labels).unwrap() - oracle_ap(&scores, &labels)).abs());
    }
    ensure(worst_refine <= 1e-6, || format!("refinement deviates by {worst_refine:e}"))?;
    ensure(worst_metric <= 1e-9, || format!("metrics deviate by {worst_metric:e}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{instances} instances; refine err {worst_refine:.1e}, metric err {worst_metric:.1e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn derived_values() -> Outcome {
    let expected = 1.0 / (1.0 + (-0.6f64).exp());
    let fused = softmax_weighted_mean([(0.2, 0.0), (0.8, 1.0)]);
    ensure((fused - expected).abs() <= 1e-9, || format!("fusion {fused} vs {expected}"))?;

    // Through embeddings the similarities are stored as f32, which bounds
    // how closely 0.2 and 0.8 can be represented.
    let snippet = EmbeddingVector::from_unit(vec![1.0, 0.0]).unwrap();
    let at = |c: f32| EmbeddingVector::normalized(vec![c, (1.0 - c * c).sqrt()]).unwrap();
    let snippets = vec![snippet.clone(), snippet];
    let summaries = vec![at(0.2), at(0.8)];
    let refined = RefinementInputs::new(&snippets, &summaries, &[0.0, 1.0], 2).unwrap().refine();
    ensure((refined[0] - expected).abs() <= 1e-7, || format!("refine {} vs {expected}", refined[0]))?;

    let auc = roc_auc(&[0.2, 0.8, 0.6, 0.4], &[false, true, false, true]).unwrap();
    ensure(auc == 0.75, || format!("auc {auc}"))?;

    let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
    ensure((ap - 5.0 / 6.0).abs() <= 1e-12, || format!("ap {ap}"))?;

    let normal = EmbeddingVector::from_unit(vec![1.0, 0.0, 0.0]).unwrap();
    let anomalous = EmbeddingVector::from_unit(vec![0.0, 1.0, 0.0]).unwrap();
    let pair = PromptPair::new("normal", normal, "anomalous", anomalous.clone()).unwrap();
    let zs = zs_two_prompt_score(&anomalous, &pair).unwrap();
    let e = std::f64::consts::E;
    ensure((zs - e / (e + 1.0)).abs() <= 1e-9, || format!("zs {zs}"))?;

    Ok(format!("fusion {fused:.12}, auc {auc}, ap {ap:.12}, zs {zs:.12}"))
}

fn invariant_suites() -> Outcome {
    const CASES: usize = 1000;
    let mut rng = StdRng::seed_from_u64(SEED ^ 0xF00D);

    for case in 0..CASES {
        // Cleaning: fixpoint under a restricted pool, and order independence.
        let frames = rng.gen_range(1..=12);
        let dim = rng.gen_range(2..=6);
        let entries = random_pool(&mut rng, frames, dim, true);
        let images: Vec<Option<EmbeddingVector>> =
            (0..frames).map(|_| Some(random_unit(&mut rng, dim, true))).collect();
        let seq = lattice(frames);
        let pool = CaptionPool::from_entries("v", entries.clone()).unwrap();
        let first = clean_captions(&seq, &images, &pool).unwrap();
        let second = clean_captions(&seq, &images, &pool.restricted_to(&first).unwrap()).unwrap();
        ensure(first.texts() == second.texts(), || format!("fixpoint broken in case {case}"))?;
        let mut shuffled = entries;
        shuffled.shuffle(&mut rng);
        let permuted = clean_captions(&seq, &images, &CaptionPool::from_entries("v", shuffled).unwrap()).unwrap();
        ensure(first == permuted, || format!("permutation changed captions in case {case}"))?;

        // Refinement: convex bounds and K clamping.
        let m = rng.gen_range(1..=40);
        let dim = rng.gen_range(2..=16);
        let snips: Vec<_> = (0..m).map(|_| random_unit(&mut rng, dim, case % 2 == 0)).collect();
        let sums: Vec<_> = (0..m).map(|_| random_unit(&mut rng, dim, case % 2 == 0)).collect();
        let initial = levels(&mut rng, m);
        let k = rng.gen_range(1..=m + 3);
        let inputs = RefinementInputs::new(&snips, &sums, &initial, k).unwrap();
        let refined = inputs.refine();
        for (i, r) in refined.iter().enumerate() {
            let nb = inputs.top_k_summaries(i);
            ensure(nb.len() == k.min(m), || format!("{} neighbours for K={k}, M={m}", nb.len()))?;
            let lo = nb.iter().map(|&j| initial[j]).fold(f64::INFINITY, f64::min);
            let hi = nb.iter().map(|&j| initial[j]).fold(f64::NEG_INFINITY, f64::max);
            ensure(lo <= *r && *r <= hi, || format!("refined {r} outside [{lo}, {hi}]"))?;
        }
        let clamped = refine(&snips, &sums, &initial, m).unwrap();
        let beyond = refine(&snips, &sums, &initial, m + rng.gen_range(1..100)).unwrap();
        ensure(clamped == beyond, || format!("K beyond M changed scores in case {case}"))?;
        let mut all: Vec<usize> = inputs.top_k_summaries(0);
        if k >= m {
            all.sort_unstable();
            ensure(all == (0..m).collect::<Vec<_>>(), || "K >= M must select every summary".into())?;
        }

        // Initial scores stay on the eleven levels, including imputed ones.
        let n = rng.gen_range(1..=30);
        let parsed: Vec<Option<ScoreLevel>> = (0..n)
            .map(|_| {
                if rng.gen_bool(0.3) {
                    None
                } else {
                    parse_score(&format!("[{}]", rng.gen_range(-2.0..3.0)))
                }
            })
            .collect();
        let idx: Vec<usize> = (0..n).map(|i| i * 16).collect();
        let scores = assemble_initial_scores("v", &idx, &parsed);
        for s in scores.series.initial_values() {
            let on_level = (0..=10).any(|t| (t as f64 / 10.0 - s).abs() < 1e-12);
            ensure(on_level, || format!("score {s} is not a level"))?;
        }

        // AUC: invariant under strictly increasing maps, complemented by a
        // label flip.
        let n = rng.gen_range(2..=100);
        let scores = random_scores(&mut rng, n);
        let labels = random_labels(&mut rng, n);
        let auc = roc_auc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 2.0 * s - 7.0).collect();
        let mapped_auc = roc_auc(&mapped, &labels).unwrap();
        ensure((auc - mapped_auc).abs() <= 1e-12, || format!("monotone map moved auc {auc} -> {mapped_auc}"))?;
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let flip_auc = roc_auc(&scores, &flipped).unwrap();
        ensure((auc + flip_auc - 1.0).abs() <= 1e-12, || format!("{auc} + {flip_auc} != 1"))?;
    }
    Ok(format!("{CASES} cases per suite, seed {SEED:#x}"))
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

fn end_to_end_determinism() -> Outcome {
    let start = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut reports = Vec::new();
    for dir in [a.path(), b.path()] {
        let (dataset, cfg) = load_planted(dir).map_err(|e| e.to_string())?;
        let backends = build_backends(&cfg).map_err(|e| e.to_string())?;
        reports.push(run_pipeline(&dataset, &cfg, &backends, false).map_err(|e| e.to_string())?);
    }
    let (snap_a, snap_b) = (snapshot(a.path()), snapshot(b.path()));
    ensure(!snap_a.is_empty(), || "no cache files written".into())?;
    ensure(snap_a == snap_b, || "caches differ between runs".into())?;
    ensure(reports[0] == reports[1], || "reports differ between runs".into())?;
    ensure(reports[0].roc_auc == Some(1.0), || format!("auc {:?}", reports[0].roc_auc))?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} cache files identical, AUC {:?}, {:.1}s",
        snap_a.len(),
        reports[0].roc_auc,
        elapsed.as_secs_f64()
    ))
}

fn ablation_wiring() -> Outcome {
    let cache = tempfile::tempdir().unwrap();
    let (dataset, cfg) = load_planted(cache.path()).map_err(|e| e.to_string())?;
    let backends = build_backends(&cfg).map_err(|e| e.to_string())?;
    let axes: [(SweepAxis, &[&str]); 3] = [
        (SweepAxis::Components, &["skip-cleaning", "skip-summary", "skip-refinement", "full"]),
        (
            SweepAxis::Prompt,
            &[
                "impersonation=off anomaly_prior=off",
                "impersonation=off anomaly_prior=on",
                "impersonation=on anomaly_prior=off",
                "impersonation=on anomaly_prior=on",
            ],
        ),
        (SweepAxis::Tn, &["T=2.5 N=10", "T=5 N=10", "T=10 N=10", "T=20 N=10", "T=10 N=5", "T=10 N=20"]),
    ];
    let mut shapes = Vec::new();
    for (axis, labels) in axes {
        let table = ablation_sweep(&dataset, &cfg, &backends, axis, false).map_err(|e| e.to_string())?;
        let got: Vec<&str> = table.reports.iter().map(|r| r.label.as_str()).collect();
        ensure(got == labels, || format!("{axis}: rows {got:?}"))?;
        let mut fps: Vec<&str> = table.reports.iter().map(|r| r.fingerprint.as_str()).collect();
        fps.sort_unstable();
        fps.dedup();
        ensure(fps.len() == labels.len(), || format!("{axis}: fingerprints collide"))?;
        let mut rendered = Vec::new();
        render_table(&table.reports, &mut rendered).unwrap();
        let lines = String::from_utf8(rendered).unwrap().lines().count();
        ensure(lines == labels.len() + 1, || format!("{axis}: table has {lines} lines"))?;
        shapes.push(format!("{axis}={}", labels.len()));
    }
    Ok(format!("rows {}", shapes.join(" ")))
}

fn parse_robustness() -> Outcome {
    let lv = |x: f64| ScoreLevel::snap(x);
    let corpus: Vec<(&str, Option<Option<ScoreLevel>>)> = vec![
        // compliant
        ("[0.3]", Some(lv(0.3))),
        ("[0.0]", Some(lv(0.0))),
        ("[1.0]", Some(lv(1.0))),
        ("[1]", Some(lv(1.0))),
        ("[0]", Some(lv(0.0))),
        (" [0.7] ", Some(lv(0.7))),
        ("[ 0.5 ]", Some(lv(0.5))),
        ("[.4]", Some(lv(0.4))),
        // prefixed prose
        ("The score is [0.8].", Some(lv(0.8))),
        ("Based on the description, I would rate it [0.2]", Some(lv(0.2))),
        ("Sure! [0.6]\nExplanation: people are running.", Some(lv(0.6))),
        ("As a police investigator: [0.9]", Some(lv(0.9))),
        ("scene [fight] then [0.4]", Some(lv(0.4))),
        ("[n/a] [0.1]", Some(lv(0.1))),
        ("[0.2] and later [0.9]", Some(lv(0.2))),
        ("rating: [[0.5]]", Some(lv(0.5))),
        ("[]][0.3]", Some(lv(0.3))),
        // out-of-set values
        ("[0.34]", Some(lv(0.3))),
        ("[1.7]", Some(lv(1.0))),
        ("[-0.2]", Some(lv(0.0))),
        ("[0.96]", Some(lv(1.0))),
        ("[0.05]", Some(lv(0.1))),
        ("[0.849]", Some(lv(0.8))),
        ("[85]", Some(lv(1.0))),
        ("[1e-1]", Some(lv(0.1))),
        ("[-1e300]", Some(lv(0.0))),
        ("[1e300]", Some(lv(1.0))),
        ("[0.25]", Some(lv(0.3))),
        // no parseable score
        ("", Some(None)),
        ("0.5", Some(None)),
        ("[", Some(None)),
        ("]", Some(None)),
        ("[]", Some(None)),
        ("[abc]", Some(None)),
        ("[0.3", Some(None)),
        ("0.3]", Some(None)),
        ("[NaN]", Some(None)),
        ("[inf]", Some(None)),
        ("[-inf]", Some(None)),
        ("[0.3, 0.4]", Some(None)),
        ("[1e999]", Some(None)),
        ("I cannot answer that.", Some(None)),
        // hostile input: only the absence of panics is required
        ("[\u{0}]", None),
        ("[\u{1F600}0.5]", None),
        ("[０.５]", None),
        ("[0.5\u{200B}]", None),
        ("[[[[[[[[[[[[[[[[[[[[", None),
        ("]]]]]]]]]][[[[[[[[[", None),
        ("[0x1p-2]", None),
        ("ñ[0.7]ñ", None),
    ];
    ensure(corpus.len() == 50, || format!("corpus has {} strings", corpus.len()))?;
    let mut checked = 0;
    for (text, want) in &corpus {
        let got = catch_unwind(|| parse_score(text)).map_err(|_| format!("panic on {text:?}"))?;
        if let Some(l) = got {
            ensure(l.tenths() <= 10, || format!("{text:?} parsed off the level set"))?;
        }
        if let Some(want) = want {
            ensure(got == *want, || format!("{text:?}: {got:?}, expected {want:?}"))?;
            checked += 1;
        }
    }
    Ok(format!("{} strings, {checked} with expected values, no panics", corpus.len()))
}

fn main() {
    let criteria: [Criterion; 6] = [
        ("equation oracles", equation_oracles),
        ("derived values", derived_values),
        ("invariant suites", invariant_suites),
        ("end-to-end determinism", end_to_end_determinism),
        ("ablation wiring", ablation_wiring),
        ("parse robustness", parse_robustness),
    ];
    let mut failures = Vec::new();
    for (name, run) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                println!("FAIL {name}: {detail}");
                failures.push(name);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures.len(), criteria.len());
    if !failures.is_empty() {
        std::process::exit(1);
    }
}
