use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lavad_core::backends::contract::run_contract;
use lavad_core::backends::{BackendDescriptor, BackendKind, ReqwestTransport};
use lavad_core::cache::escape_component;
use lavad_core::cleaning::PoolingMode;
use lavad_core::config::{Overrides, PipelineConfig};
use lavad_core::evaluation::{
    evaluate, expand_scores, render_table, write_curve_csv, EvaluationReport, ExpansionMode, ScoredVideo,
};
use lavad_core::manifest::{check_bounds, ingest_annotations, AnnotationFormat, Dataset, DatasetManifest};
use lavad_core::model::{labels_from_intervals, GroundTruth};
use lavad_core::pipeline::{build_backends, run_stages, run_zs_baseline, RunOptions, RunOutcome, VideoScores, ZsModality, TOKEN_ENV};
use lavad_core::sweep::{ablation_sweep, SweepAxis};

/// Training-free video anomaly detection.
#[derive(Parser)]
#[command(name = "lavad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score every video of a dataset and evaluate against its annotations.
    Run(RunArgs),
    /// Evaluate previously written score files.
    Evaluate(EvaluateArgs),
    /// Run one ablation axis and print one row per setting.
    Sweep(SweepArgs),
    /// Comparison baselines.
    #[command(subcommand)]
    Baseline(BaselineCommand),
    /// Check a backend service against the wire protocol.
    Contract(ContractArgs),
}

#[derive(Args)]
struct Inputs {
    /// Dataset manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Pipeline configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stage cache root; overrides the configuration.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Recompute every stage even when cached.
    #[arg(long)]
    force: bool,
    /// Directory for the report and per-video outputs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SettingFlags {
    #[arg(long)]
    skip_cleaning: bool,
    #[arg(long)]
    skip_summary: bool,
    #[arg(long)]
    skip_refinement: bool,
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set)]
    impersonation: Option<bool>,
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set)]
    anomaly_prior: Option<bool>,
    /// Neighbours used by refinement.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    window_seconds: Option<f64>,
    #[arg(long)]
    frames_per_window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// `ensemble` or `single:SOURCE`.
    #[arg(long)]
    pooling: Option<PoolingMode>,
}

impl SettingFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            skip_cleaning: self.skip_cleaning,
            skip_summary: self.skip_summary,
            skip_refinement: self.skip_refinement,
            impersonation: self.impersonation,
            anomaly_prior: self.anomaly_prior,
            neighbors: self.k,
            window_seconds: self.window_seconds,
            frames_per_window: self.frames_per_window,
            stride: self.stride,
            pooling: self.pooling.clone(),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    settings: SettingFlags,
    /// Also write frame-level `frame_index,score,label` CSVs under OUT/curves.
    #[arg(long, requires = "out")]
    curves: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Directory of per-video score files written by `run --out`.
    #[arg(long)]
    scores: PathBuf,
    /// Annotation file; defaults to the one named by the manifest.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Manifest supplying frame counts (and annotations if not given).
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "ucf_interval")]
    annotation_format: AnnotationFormat,
    #[arg(long, default_value = "nearest")]
    expansion: ExpansionMode,
    #[arg(long, default_value = "evaluate")]
    label: String,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    axis: SweepAxis,
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    settings: SettingFlags,
}

#[derive(Subcommand)]
enum BaselineCommand {
    /// Zero-shot two-prompt scoring with the image or video encoder.
    Zs(ZsArgs),
}

#[derive(Args)]
struct ZsArgs {
    #[arg(long)]
    modality: ZsModality,
    #[command(flatten)]
    inputs: Inputs,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Captioner,
    TextEncoder,
    ImageEncoder,
    VideoEncoder,
    Llm,
}

impl From<KindArg> for BackendKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Captioner => BackendKind::Captioner,
            KindArg::TextEncoder => BackendKind::TextEncoder,
            KindArg::ImageEncoder => BackendKind::ImageEncoder,
            KindArg::VideoEncoder => BackendKind::VideoEncoder,
            KindArg::Llm => BackendKind::Llm,
        }
    }
}

#[derive(Args)]
struct ContractArgs {
    /// Base URL of the service.
    #[arg(long)]
    endpoint: String,
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Model tag the service hosts.
    #[arg(long)]
    model: String,
    /// Declared embedding dimension (encoders).
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value_t = 60.0)]
    timeout_s: f64,
}

fn load_config(inputs: &Inputs, settings: Option<&SettingFlags>) -> Result<PipelineConfig> {
    let mut cfg = match &inputs.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(dir) = &inputs.cache_dir {
        cfg.cache_dir = dir.clone();
    }
    match settings {
        Some(s) => s.overrides().apply(&mut cfg)?,
        None => cfg.validate()?,
    }
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Ok(DatasetManifest::load(path)?.load_dataset()?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_table(reports: &[EvaluationReport]) -> Result<()> {
    render_table(reports, &mut std::io::stdout().lock())?;
    Ok(())
}

/// Writes `report.json` and `scores/<video>.json` under `out`.
fn write_outcome(out: &Path, outcome: &RunOutcome) -> Result<()> {
    let scores_dir = out.join("scores");
    fs::create_dir_all(&scores_dir).with_context(|| format!("creating {}", scores_dir.display()))?;
    if let Some(report) = &outcome.report {
        write_json(&out.join("report.json"), report)?;
    }
    for s in &outcome.scores {
        let name = format!("{}.json", escape_component(&s.series.video_id));
        write_json(&scores_dir.join(name), s)?;
    }
    Ok(())
}

fn write_curves(out: &Path, dataset: &Dataset, cfg: &PipelineConfig, scores: &[VideoScores]) -> Result<()> {
    let dir = out.join("curves");
    fs::create_dir_all(&dir)?;
    for s in scores {
        let meta = dataset
            .manifest
            .videos
            .iter()
            .find(|v| v.video_id == s.series.video_id)
            .expect("scores come from manifest videos");
        let frames = expand_scores(&s.series.frame_indices, &s.series.final_scores(), meta.num_frames, cfg.expansion);
        let labels = labels_from_intervals(&dataset.truth[&meta.video_id], meta.num_frames)?;
        write_curve_csv(&dir.join(format!("{}.csv", escape_component(&meta.video_id))), &frames, &labels)?;
    }
    Ok(())
}

fn log_stats(outcome: &RunOutcome) {
    for (stage, c) in &outcome.stats.0 {
        if c.failed > 0 {
            log::warn!("{stage}: {} of {} items failed", c.failed, c.total);
        }
    }
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = load_config(&args.inputs, Some(&args.settings))?;
    let dataset = load_dataset(&args.inputs.manifest)?;
    let backends = build_backends(&cfg)?;
    let options = RunOptions {
        force: args.inputs.force,
        ..RunOptions::default()
    };
    let outcome = run_stages(&dataset, &cfg, &backends, &options)?;
    log_stats(&outcome);
    if let Some(out) = &args.inputs.out {
        write_outcome(out, &outcome)?;
        if args.curves {
            write_curves(out, &dataset, &cfg, &outcome.scores)?;
        }
    }
    print_table(outcome.report.as_slice())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let manifest = DatasetManifest::load(&args.manifest)?;
    let truth: BTreeMap<String, GroundTruth> = match &args.annotations {
        Some(path) => ingest_annotations(path, args.annotation_format)?,
        None => manifest.clone().load_dataset()?.truth,
    };

    let mut entries: Vec<PathBuf> = fs::read_dir(&args.scores)
        .with_context(|| format!("reading {}", args.scores.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.retain(|p| p.extension().is_some_and(|x| x == "json"));
    entries.sort();
    if entries.is_empty() {
        bail!("no score files in {}", args.scores.display());
    }
    let mut loaded: Vec<VideoScores> = Vec::with_capacity(entries.len());
    for path in &entries {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let s: VideoScores = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        s.series.validate().with_context(|| format!("invalid series in {}", path.display()))?;
        loaded.push(s);
    }
    loaded.sort_by(|a, b| a.series.video_id.cmp(&b.series.video_id));

    let normals: Vec<GroundTruth> = loaded
        .iter()
        .map(|s| GroundTruth::normal(s.series.video_id.clone()))
        .collect();
    let mut scored = Vec::with_capacity(loaded.len());
    for (s, normal) in loaded.iter().zip(&normals) {
        let id = &s.series.video_id;
        let Some(meta) = manifest.videos.iter().find(|v| &v.video_id == id) else {
            bail!("video `{id}` is not in the manifest");
        };
        let gt = truth.get(id).unwrap_or(normal);
        check_bounds(gt, meta)?;
        scored.push(ScoredVideo {
            meta,
            series: &s.series,
            truth: gt,
            flags: s.flags.clone(),
        });
    }
    let report = evaluate(&manifest.dataset, &args.label, "-", &scored, args.expansion)?;
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    print_table(std::slice::from_ref(&report))
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let cfg = load_config(&args.inputs, Some(&args.settings))?;
    let dataset = load_dataset(&args.inputs.manifest)?;
    let backends = build_backends(&cfg)?;
    let table = ablation_sweep(&dataset, &cfg, &backends, args.axis, args.inputs.force)?;
    if let Some(out) = &args.inputs.out {
        fs::create_dir_all(out)?;
        write_json(&out.join(format!("sweep-{}.json", args.axis)), &table.reports)?;
    }
    print_table(&table.reports)
}

fn cmd_zs(args: ZsArgs) -> Result<()> {
    let cfg = load_config(&args.inputs, None)?;
    let dataset = load_dataset(&args.inputs.manifest)?;
    let backends = build_backends(&cfg)?;
    let outcome = run_zs_baseline(&dataset, &cfg, &backends, args.modality, args.inputs.force)?;
    log_stats(&outcome);
    if let Some(out) = &args.inputs.out {
        write_outcome(out, &outcome)?;
    }
    print_table(outcome.report.as_slice())
}

fn cmd_contract(args: ContractArgs) -> Result<bool> {
    let mut d = BackendDescriptor::mock(args.kind.into(), &args.model);
    d.endpoint = args.endpoint.clone();
    d.embed_dim = args.dim;
    d.timeout_s = args.timeout_s;
    let token = std::env::var(TOKEN_ENV).ok().filter(|t| !t.is_empty());
    let transport = ReqwestTransport::new(args.endpoint, Duration::from_secs_f64(args.timeout_s), token)?;
    let checks = run_contract(&d, transport);
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a).map(|_| true),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| true),
        Command::Sweep(a) => cmd_sweep(a).map(|_| true),
        Command::Baseline(BaselineCommand::Zs(a)) => cmd_zs(a).map(|_| true),
        Command::Contract(a) => cmd_contract(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
