//! The `convseg` command line.
//!
//! [`dispatch`] parses an argument list, runs one subcommand and returns the
//! process exit code: 0 on success, 1 on operational failure, 2 on usage
//! errors (bad flags, bad config, unmet preconditions).

pub mod coco;
pub mod config;

// Runs the guide's code blocks as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/masks-and-metrics.md")]
    mod masks_and_metrics {}
    #[doc = include_str!("../../../book/src/data-engine.md")]
    mod data_engine {}
    #[doc = include_str!("../../../book/src/model-and-training.md")]
    mod model_and_training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/review.md")]
    mod review {}
    #[doc = include_str!("../../../book/src/command-line.md")]
    mod command_line {}
}

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use convseg_core::synthetic::{write_dataset, SceneSpec};
use convseg_core::{load_manifest, manifest_stats, save_manifest, ConceptFamily, DatasetManifest, Split};
use convseg_engine::{image_records_from_dir, resume_pipeline, BackendConfig, EngineConfig, EngineError, Pipeline};
use convseg_net::{
    evaluate_predictions, loss_log_csv, predict_dataset, train_phase, Checkpoint, DataGroup, GroupId, ModelConfig,
    Phase, PredictionSet, SegModel, TrainConfig, TrainOptions, DEFAULT_THRESHOLD,
};
use convseg_review::{
    candidates_from_manifest, load_candidate_lines, prepare_candidates, serve_blocking, ReviewStore, ServerConfig,
    SystemClock, DEFAULT_LEASE_MS, DEFAULT_PORT,
};
use log::info;
use serde_json::{json, Value};

use crate::config::{from_value, merge, resolve, CliConfig};

#[derive(Debug)]
pub enum CliError {
    /// Exit code 2.
    Usage(String),
    /// Exit code 1.
    Failed(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Failed(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Failed(e)
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_) | EngineError::Template(_) => CliError::Usage(e.to_string()),
            other => CliError::Failed(other.into()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn failed<E: Into<anyhow::Error>>(e: E) -> CliError {
    CliError::Failed(e.into())
}

#[derive(Debug, Parser)]
#[command(name = "convseg", version, about = "Conversational image segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the data engine over a directory of images.
    #[command(subcommand)]
    Engine(EngineCommand),
    /// Inspect, convert or synthesize manifests.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train one curriculum phase.
    Train(TrainArgs),
    /// Predict a manifest with a checkpoint and score the predictions.
    Eval(EvalArgs),
    /// Score an existing predictions file against a manifest.
    Report(ReportArgs),
    /// Start the human review service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
enum EngineCommand {
    /// Start a run.
    Run(EngineRunArgs),
    /// Continue an interrupted run from its output directory.
    Resume {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct EngineRunArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use offline backends: the seeded synthetic mocks, or recorded
    /// responses when a directory is given.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    fixtures: Option<String>,
    /// Seed-mask manifest; skips grounding.
    #[arg(long)]
    seed_masks: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum DatasetCommand {
    /// Print split, concept and prompt-length statistics as JSON.
    Stats {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Convert COCO instance annotations into a manifest.
    ConvertCoco {
        #[arg(long)]
        annotations: PathBuf,
        /// Directory the COCO `file_name`s are relative to.
        #[arg(long)]
        images: PathBuf,
        /// Output manifest path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
        #[arg(long, default_value = "entities")]
        concept: String,
        #[arg(long)]
        include_crowd: bool,
    },
    /// Write a synthetic scene dataset (images plus manifest).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    phase: Option<u8>,
    /// Training data as `GROUP=PATH`; a bare path is the literal group in
    /// phase 1 and is split into conversational positives and negatives in
    /// phase 2.
    #[arg(long)]
    manifest: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Phase-1 checkpoint to start phase 2 from.
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    /// Mid-run checkpoint of this phase to resume.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threshold: Option<f32>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for `report.json` and `report.txt`; printed only when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest to review; every sample is suggested for acceptance.
    #[arg(long, conflicts_with = "candidates", required_unless_present = "candidates")]
    manifest: Option<PathBuf>,
    /// Candidate file with per-candidate AI suggestions.
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// State directory: verdict log and rendered overlays.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    ui_dir: Option<PathBuf>,
    /// Also write the accepted manifest here on every export request.
    #[arg(long)]
    export: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the command and returns the
/// exit code. Usage text and errors go to stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Engine(EngineCommand::Run(a)) => engine_run(a),
        Command::Engine(EngineCommand::Resume { out }) => engine_resume(&out),
        Command::Dataset(DatasetCommand::Stats { manifest }) => dataset_stats(&manifest),
        Command::Dataset(DatasetCommand::ConvertCoco {
            annotations,
            images,
            out,
            split,
            concept,
            include_crowd,
        }) => {
            let opts = coco::ConvertOptions {
                split: split.parse::<Split>().map_err(CliError::Usage)?,
                concept: parse_concept(&concept)?,
                include_crowd,
            };
            let manifest = coco::convert_coco(&annotations, &images, &opts)?;
            create_parent(&out)?;
            save_manifest(&manifest, &out).map_err(failed)?;
            print_json(&json!({ "samples": manifest.len(), "out": out }));
            Ok(())
        }
        Command::Dataset(DatasetCommand::Synth {
            out,
            count,
            seed,
            config,
        }) => {
            let cfg = CliConfig::load(config.as_deref())?;
            let seed = seed.or(cfg.seed).unwrap_or(0);
            let (manifest, _) = write_dataset(&out, count, &SceneSpec::default(), seed).map_err(failed)?;
            let path = out.join("manifest.jsonl");
            save_manifest(&manifest, &path).map_err(failed)?;
            print_json(&json!({ "samples": manifest.len(), "manifest": path }));
            Ok(())
        }
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Serve(a) => serve(a),
    }
}

fn print_json(v: &impl serde::Serialize) {
    emit(&format!("{}\n", serde_json::to_string_pretty(v).expect("output serializes")));
}

// A closed stdout (e.g. piped into `head`) is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn parse_concept(s: &str) -> CliResult<ConceptFamily> {
    ConceptFamily::ALL
        .into_iter()
        .find(|c| c.as_str() == s)
        .ok_or_else(|| CliError::Usage(format!("unknown concept `{s}`")))
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(CliError::Failed)
}

fn create_parent(path: &Path) -> CliResult {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) => create_dir(dir),
        None => Ok(()),
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(v).expect("config serializes") + "\n";
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::Failed)
}

fn log_resolved(what: &str, v: &impl serde::Serialize) {
    info!("resolved {what} config: {}", serde_json::to_string(v).expect("config serializes"));
}

/// Engine config: built-in defaults, then the config file, then flags.
/// Backends come from the config file or `--fixtures`; there is no silent
/// default.
fn resolve_engine(a: &EngineRunArgs, cfg: &CliConfig) -> CliResult<EngineConfig> {
    let seed = a.seed.or(cfg.seed);
    let mut value = serde_json::to_value(EngineConfig::synthetic("run", "engine-out", seed.unwrap_or(0))).expect("serializes");
    let obj = value.as_object_mut().expect("engine config is an object");
    for backend in ["vlm", "detector", "segmenter"] {
        obj.remove(backend);
    }
    merge(&mut value, &cfg.engine);
    let obj = value.as_object_mut().expect("engine config is an object");
    if let Some(dir) = &a.fixtures {
        let backend = if dir.is_empty() {
            BackendConfig::mock(seed.unwrap_or(0))
        } else {
            BackendConfig {
                backoff_ms: 0,
                ..BackendConfig::new(format!("fixture://{dir}"))
            }
        };
        for name in ["vlm", "detector", "segmenter"] {
            obj.insert(name.into(), serde_json::to_value(&backend).expect("serializes"));
        }
    }
    if let Some(out) = &a.out {
        obj.insert("out_dir".into(), json!(out));
        if !cfg.engine.contains_key("run_id") {
            let id = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
            obj.insert("run_id".into(), json!(id));
        }
    }
    if let Some(path) = &a.seed_masks {
        obj.insert("seed_masks".into(), json!(path));
    }
    for name in ["vlm", "detector", "segmenter"] {
        if !obj.contains_key(name) {
            return Err(CliError::Usage(format!(
                "no `{name}` backend: set engine.{name} in the config or pass --fixtures"
            )));
        }
    }
    let mut engine: EngineConfig = from_value(value, "engine")?;
    if let Some(seed) = seed {
        engine.stages.seed = Some(seed);
        for b in [&mut engine.vlm, &mut engine.detector, &mut engine.segmenter] {
            if b.endpoint.starts_with("mock://") {
                b.seed = Some(seed);
            }
        }
    }
    engine.validate()?;
    Ok(engine)
}

fn engine_run(a: EngineRunArgs) -> CliResult {
    let cfg = CliConfig::load(a.config.as_deref())?;
    let engine = resolve_engine(&a, &cfg)?;
    log_resolved("engine", &engine);
    create_dir(&engine.out_dir)?;
    let images = image_records_from_dir(&a.images)?;
    if images.is_empty() {
        return Err(CliError::Usage(format!("no images in {}", a.images.display())));
    }
    let pipeline = Pipeline::new(engine)?;
    let total = images.len();
    let out = pipeline.run_with_progress(&images, &|i, id| info!("image {}/{total}: {id}", i + 1))?;
    print_json(&out.summary);
    Ok(())
}

fn engine_resume(out: &Path) -> CliResult {
    let run = resume_pipeline(out)?;
    print_json(&run.summary);
    Ok(())
}

fn dataset_stats(path: &Path) -> CliResult {
    let manifest = load_manifest(path).map_err(failed)?;
    print_json(&manifest_stats(&manifest));
    Ok(())
}

fn resolve_model(cfg: &CliConfig, seed: Option<u64>) -> CliResult<ModelConfig> {
    let mut patch = cfg.model.clone();
    let base = match patch.remove("preset").as_ref().map(|v| v.as_str()) {
        None | Some(Some("tiny")) => ModelConfig::tiny(),
        Some(Some("full")) => ModelConfig::full(),
        Some(other) => return Err(CliError::Usage(format!("unknown model preset {other:?}"))),
    };
    let mut model: ModelConfig = resolve(&base, &patch, "model")?;
    if let Some(seed) = seed {
        model.init_seed = seed;
    }
    model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(model)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Checkpoint::load(path).map_err(failed)
}

fn data_groups(a: &TrainArgs, cfg: &CliConfig, phase: Phase) -> CliResult<Vec<DataGroup>> {
    let mut sources: Vec<(Option<GroupId>, PathBuf)> = cfg.data.iter().map(|(g, p)| (Some(*g), p.clone())).collect();
    for m in &a.manifest {
        match m.split_once('=') {
            Some((g, p)) => {
                let g = g.parse::<GroupId>().map_err(|e| CliError::Usage(e.to_string()))?;
                sources.retain(|(existing, _)| *existing != Some(g));
                sources.push((Some(g), PathBuf::from(p)));
            }
            None => sources.push((None, PathBuf::from(m))),
        }
    }
    if sources.is_empty() {
        return Err(CliError::Usage("no training data: pass --manifest or set `data` in the config".into()));
    }
    let mut by_group: std::collections::BTreeMap<GroupId, Vec<convseg_core::Sample>> = Default::default();
    for (group, path) in sources {
        let manifest = load_with_images(&path)?;
        match group {
            Some(g) => by_group.entry(g).or_default().extend(manifest.samples),
            None if phase == Phase::Pretrain => by_group.entry(GroupId::Literal).or_default().extend(manifest.samples),
            None => {
                for s in manifest.samples {
                    let g = if s.is_negative {
                        GroupId::ConversationalNeg
                    } else {
                        GroupId::ConversationalPos
                    };
                    by_group.entry(g).or_default().push(s);
                }
            }
        }
    }
    by_group
        .into_iter()
        .map(|(g, samples)| DataGroup::new(g, DatasetManifest::new(samples)).map_err(|e| CliError::Usage(e.to_string())))
        .collect()
}

fn train(a: TrainArgs) -> CliResult {
    let cfg = CliConfig::load(a.config.as_deref())?;
    let seed = a.seed.or(cfg.seed);
    let mut train: TrainConfig = resolve(&TrainConfig::default(), &cfg.train, "train")?;
    if let Some(p) = a.phase {
        train.phase = Phase::try_from(p).map_err(CliError::Usage)?;
    }
    if let Some(seed) = seed {
        train.seed = seed;
    }
    train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if train.phase == Phase::Conversational && a.init_checkpoint.is_none() && a.checkpoint.is_none() {
        return Err(CliError::Usage(
            "phase 2 starts from a phase-1 checkpoint: pass --init-checkpoint".into(),
        ));
    }
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("train-phase{}", train.phase.number())));
    create_dir(&out)?;

    let init = a.init_checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let resume = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    // architecture follows the checkpoint being continued
    let model_cfg = match resume.as_ref().or(init.as_ref()) {
        Some(ck) => ck.meta.model.clone(),
        None => resolve_model(&cfg, seed)?,
    };
    let groups = data_groups(&a, &cfg, train.phase)?;
    log_resolved("model", &model_cfg);
    log_resolved("train", &train);
    write_json(&out.join("train_config.json"), &json!({ "model": model_cfg, "train": train }))?;

    let model = SegModel::new(model_cfg, DType::F32, Device::Cpu).map_err(failed)?;
    let outcome = train_phase(
        &model,
        &train,
        &groups,
        TrainOptions {
            out_dir: Some(out.clone()),
            init,
            resume,
            ..TrainOptions::default()
        },
    )
    .map_err(|e| match e {
        convseg_net::NetError::Training(m) | convseg_net::NetError::Curriculum(m) => CliError::Usage(m),
        other => failed(other),
    })?;
    let last = outcome.log.iter().rev().find(|r| r.category == "all");
    print_json(&json!({
        "phase": train.phase.number(),
        "step": outcome.checkpoint.meta.step,
        "final_loss": last.map(|r| r.loss),
        "checkpoint": out.join("final.ckpt"),
        "loss_log": out.join("loss_log.csv"),
    }));
    if outcome.log.is_empty() {
        info!("no steps run; loss log header only: {}", loss_log_csv(&[]).trim());
    }
    Ok(())
}

/// Loads a manifest for image access. A relative image uri resolves against
/// the working directory, or against the manifest's directory when only
/// that path exists.
fn load_with_images(path: &Path) -> anyhow::Result<DatasetManifest> {
    let mut manifest = load_manifest(path).with_context(|| format!("loading {}", path.display()))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    for s in &mut manifest.samples {
        let uri = Path::new(&s.image.uri);
        if uri.is_relative() && !uri.exists() && dir.join(uri).exists() {
            s.image.uri = dir.join(uri).to_string_lossy().into_owned();
        }
    }
    Ok(manifest)
}

fn eval(a: EvalArgs) -> CliResult {
    let cfg = CliConfig::load(a.config.as_deref())?;
    let threshold = a.threshold.or(cfg.eval.threshold).unwrap_or(DEFAULT_THRESHOLD);
    if !threshold.is_finite() {
        return Err(CliError::Usage(format!("threshold must be finite, got {threshold}")));
    }
    log_resolved("eval", &json!({ "threshold": threshold, "checkpoint": a.checkpoint, "manifest": a.manifest }));
    let manifest = load_with_images(&a.manifest)?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let model = ck.to_model(DType::F32, Device::Cpu).map_err(failed)?;
    create_dir(&a.out)?;
    let model_id = a.checkpoint.to_string_lossy().into_owned();
    let preds = predict_dataset(&model, &manifest, threshold, None, &model_id);
    preds.save(&a.out.join("predictions.jsonl")).map_err(failed)?;
    let report = evaluate_predictions(&preds, &manifest).map_err(failed)?;
    report.write(&a.out).map_err(failed)?;
    emit(&report.to_text());
    if let Some((id, e)) = preds.errors.iter().next().filter(|_| preds.errors.len() == manifest.len()) {
        return Err(failed(anyhow::anyhow!("every prediction failed; {id}: {e}")));
    }
    Ok(())
}

fn report(a: ReportArgs) -> CliResult {
    let preds = PredictionSet::load(&a.predictions).map_err(failed)?;
    let manifest = load_manifest(&a.manifest).map_err(failed)?;
    let report = evaluate_predictions(&preds, &manifest).map_err(failed)?;
    if let Some(out) = &a.out {
        create_dir(out)?;
        report.write(out).map_err(failed)?;
    }
    emit(&report.to_text());
    Ok(())
}

fn serve(a: ServeArgs) -> CliResult {
    let cfg = CliConfig::load(a.config.as_deref())?;
    let lines = match (&a.manifest, &a.candidates) {
        (Some(m), None) => candidates_from_manifest(&load_with_images(m)?),
        (None, Some(c)) => load_candidate_lines(c).map_err(failed)?,
        _ => return Err(CliError::Usage("pass exactly one of --manifest and --candidates".into())),
    };
    create_dir(&a.out)?;
    let candidates = prepare_candidates(lines, &a.out).map_err(failed)?;
    let lease_ms = cfg.serve.lease_ms.unwrap_or(DEFAULT_LEASE_MS);
    if lease_ms == 0 {
        return Err(CliError::Usage("serve.lease_ms must be positive".into()));
    }
    let server = ServerConfig {
        port: a.port.or(cfg.serve.port).unwrap_or(DEFAULT_PORT),
        ui_dir: a.ui_dir.or(cfg.serve.ui_dir),
        export_path: a.export.or(cfg.serve.export),
    };
    if let Some(p) = &server.export_path {
        create_parent(p)?;
    }
    log_resolved(
        "serve",
        &json!({ "port": server.port, "ui_dir": server.ui_dir, "export": server.export_path, "lease_ms": lease_ms, "out": a.out }),
    );
    let store = ReviewStore::open(candidates, &a.out.join("events.jsonl"), Arc::new(SystemClock), lease_ms).map_err(failed)?;
    info!("{} candidates, {} already decided", store.stats().total, store.stats().decided);
    serve_blocking(Arc::new(store), server).map_err(failed)
}

/// Value of a resolved engine config for the given flags, for inspection
/// without running anything.
pub fn resolved_engine_config(argv: &[&str]) -> Result<Value, String> {
    let cli = Cli::try_parse_from(std::iter::once("convseg").chain(argv.iter().copied())).map_err(|e| e.to_string())?;
    let Command::Engine(EngineCommand::Run(a)) = cli.command else {
        return Err("not an `engine run` command".into());
    };
    let cfg = CliConfig::load(a.config.as_deref()).map_err(|e| e.to_string())?;
    let engine = resolve_engine(&a, &cfg).map_err(|e| e.to_string())?;
    Ok(serde_json::to_value(engine).expect("serializes"))
}
