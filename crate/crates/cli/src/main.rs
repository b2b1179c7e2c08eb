//! `verbdiff` — batch CLI binding the pipeline stages together: data
//! preparation, anchor/balance tables, fine-tuning, sampling, interaction-
//! region extraction, and metric evaluation.
//!
//! Exit codes are a stable contract: 0 success, 1 usage, 2 data error,
//! 3 backend error.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use verbdiff_core::attention_geometry::{
    aggregate_token_map, centroid, interaction_center, interaction_region, write_region_debug,
    Centroid, GeometryError, RegionExponent, RegionParams, RegionSidecar, Role, StepAggregation,
};
use verbdiff_core::eval_harness::{
    evaluate, resolve_similarity_backend, CaptionCache, EvalError, EvalItem, EvalReport,
    EvalSuite, OracleSuite, ScriptedDetector, ScriptedVqa, ToyCaptioner,
};
use verbdiff_core::hoi_data::{
    build_anchor_table, build_balance_table, gt_interaction_region, load_annotations,
    prompt_parts, realign_outcome, render_prompt, write_annotations, AnnotationRecord,
    BalanceMode, DataError, HOITriplet, PromptRecord,
};
use verbdiff_core::model_adapters::{
    resolve_backend, BackendError, Image, TextEncoderPort, ToyBackend,
    DEFAULT_INFERENCE_STEPS, DEFAULT_TRAIN_SAMPLING_STEPS, INFERENCE_NEGATIVE_PROMPT,
};
use verbdiff_core::synth::{fixture_images, prep_fixture_records, training_fixture_records};
use verbdiff_core::trainer::{
    run_with_budget, Checkpoint, TrainConfig, TrainDataset, TrainError, CHECKPOINT_FILE,
};

// ---------------------------------------------------------------------------
// Errors and exit codes
// ---------------------------------------------------------------------------

/// Command failure bucketed by the exit-code contract.
#[derive(Debug)]
enum CliError {
    /// Bad invocation or malformed request (exit 1).
    Usage(String),
    /// Unreadable, missing, or inconsistent inputs and artifacts (exit 2).
    Data(String),
    /// Backend resolution, sampling, or scorer-port failures (exit 3).
    Backend(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Backend(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Backend(m) => f.write_str(m),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        CliError::Backend(e.to_string())
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Backend(inner) => CliError::Backend(inner.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match &e {
            EvalError::Backend(_)
            | EvalError::Port { .. }
            | EvalError::TextOnly { .. }
            | EvalError::UnknownSimilarityKey { .. } => CliError::Backend(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn data_io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "verbdiff",
    version,
    about = "Interaction-aware diffusion fine-tuning: data prep, training, sampling, and evaluation",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Realign annotations into per-class prompts and build the anchor,
    /// balance, and summary tables.
    PrepData(PrepDataArgs),
    /// Print (and optionally write) the anchor-verb and class-balance tables.
    Anchors(AnchorsArgs),
    /// Fine-tune the cross-attention parameters on an annotated corpus.
    Train(TrainArgs),
    /// Sample images from a trained checkpoint.
    Generate(GenerateArgs),
    /// Write interaction-region overlays and JSON sidecars.
    ExtractRegions(ExtractRegionsArgs),
    /// Score generated images against their labels.
    Eval(EvalArgs),
}

/// Built-in synthetic corpora.
#[derive(ValueEnum, Clone, Copy, Debug)]
enum SyntheticFixture {
    /// 50-image mixed corpus: dual-interaction images, a no-interaction
    /// class, and an anchor tie.
    Demo,
    /// 62-image, 8-class training corpus with rare classes.
    Train8,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BalanceModeArg {
    /// α(k) = (1−β^n_k)/(1−β), the effective number itself.
    AsWritten,
    /// Inverse effective numbers, rescaled to mean 1 over classes.
    InverseNormalized,
}

impl From<BalanceModeArg> for BalanceMode {
    fn from(v: BalanceModeArg) -> Self {
        match v {
            BalanceModeArg::AsWritten => BalanceMode::AsWritten,
            BalanceModeArg::InverseNormalized => BalanceMode::InverseNormalized,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ExponentArg {
    /// Half-extent = Euclidean centroid distance.
    Distance,
    /// Half-extent = squared centroid distance.
    SquaredDistance,
}

impl From<ExponentArg> for RegionExponent {
    fn from(v: ExponentArg) -> Self {
        match v {
            ExponentArg::Distance => RegionExponent::Distance,
            ExponentArg::SquaredDistance => RegionExponent::SquaredDistance,
        }
    }
}

#[derive(Args)]
struct PrepDataArgs {
    /// Annotation JSONL (one image record per line).
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    annotations: Option<PathBuf>,
    /// Materialize a built-in synthetic corpus (annotations + PNGs) instead
    /// of reading an annotation file.
    #[arg(long, value_enum)]
    synthetic: Option<SyntheticFixture>,
    /// Output directory for tables (and the corpus under --synthetic).
    #[arg(long)]
    out: PathBuf,
    /// Per-class weight rule for the balance table.
    #[arg(long, value_enum, default_value = "as-written")]
    balance_mode: BalanceModeArg,
}

#[derive(Args)]
struct AnchorsArgs {
    /// Annotation JSONL to derive the tables from.
    #[arg(long)]
    annotations: PathBuf,
    /// Optional directory to write anchors.json and balance.json into.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-class weight rule for the balance table.
    #[arg(long, value_enum, default_value = "as-written")]
    balance_mode: BalanceModeArg,
}

#[derive(Args)]
struct TrainArgs {
    /// Annotation JSONL for the training corpus.
    #[arg(long)]
    annotations: PathBuf,
    /// Directory of {image_id}.png training images.
    #[arg(long)]
    images: PathBuf,
    /// Run directory; accumulates config.lock, checkpoint, and metrics.
    #[arg(long)]
    run_dir: PathBuf,
    /// Training config TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue a run whose directory already holds a checkpoint.
    #[arg(long)]
    resume: bool,
    /// Stop this invocation after N steps; the run stays resumable and its
    /// configured step total is unchanged.
    #[arg(long)]
    step_budget: Option<u64>,
    /// Master seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Total training steps (overrides the config file; default one epoch).
    #[arg(long)]
    max_steps: Option<u64>,
    /// Images per class batch (overrides the config file).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate (overrides the config file).
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Masked-reconstruction weight λ1 (overrides the config file).
    #[arg(long)]
    lambda_rec: Option<f64>,
    /// Disentanglement-guidance weight λ2 (overrides the config file).
    #[arg(long)]
    lambda_rdg: Option<f64>,
    /// Direction-guidance weight λ3 (overrides the config file).
    #[arg(long)]
    lambda_idg: Option<f64>,
    /// Model backend key (overrides the config file).
    #[arg(long)]
    backend: Option<String>,
}

#[derive(Args)]
struct GenerateArgs {
    /// Trained checkpoint to sample from.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Triplet "human,verb,object", rendered through the prompt template.
    #[arg(long, required_unless_present = "prompt", conflicts_with = "prompt")]
    triplet: Option<String>,
    /// Free-text prompt (no role spans).
    #[arg(long)]
    prompt: Option<String>,
    /// Base seed; image i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Denoising steps.
    #[arg(long, default_value_t = DEFAULT_INFERENCE_STEPS)]
    steps: usize,
    /// Negative prompt recorded in the sidecar (toy backends ignore it).
    #[arg(long, default_value = INFERENCE_NEGATIVE_PROMPT)]
    negative: String,
    /// Number of images to sample.
    #[arg(long, default_value_t = 1)]
    count: u64,
    /// Output directory for PNGs and the generation sidecar.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExtractRegionsArgs {
    /// Real-image mode: annotation JSONL carrying the boxes.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Real-image mode: directory of {image_id}.png base images.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Generated mode: checkpoint to sample from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Generated mode: triplet "human,verb,object" to condition on.
    #[arg(long)]
    triplet: Option<String>,
    /// Seed for the generated mode.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sampling steps for the generated mode.
    #[arg(long, default_value_t = DEFAULT_TRAIN_SAMPLING_STEPS)]
    steps: usize,
    /// Output directory for overlays and sidecars.
    #[arg(long)]
    out: PathBuf,
    /// Region size rule: exponent on the human–object centroid distance.
    #[arg(long, value_enum, default_value = "distance")]
    exponent: ExponentArg,
    /// Minimum half-extent as a fraction of the larger grid side.
    #[arg(long, default_value_t = 0.05)]
    min_extent: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum EvalBackendArg {
    /// Deterministic toy scorers (plus any file-backed similarity backends
    /// discovered via the backend directory).
    Toy,
    /// Ground-truth oracle scorers; every metric scores 1.0 on its own
    /// items. The end-to-end wiring fixture.
    Oracle,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SettingArg {
    /// Top-1 verb and object over all classes.
    DefFull,
    /// Top-1 verb and object over rare classes.
    DefRare,
    /// Known-object filtering over all classes.
    KoFull,
    /// Known-object filtering over rare classes.
    KoRare,
}

impl SettingArg {
    fn score_key(self) -> &'static str {
        match self {
            SettingArg::DefFull => "hoi_def_full",
            SettingArg::DefRare => "hoi_def_rare",
            SettingArg::KoFull => "hoi_ko_full",
            SettingArg::KoRare => "hoi_ko_rare",
        }
    }

    fn is_rare(self) -> bool {
        matches!(self, SettingArg::DefRare | SettingArg::KoRare)
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of {image_id}.png images to score.
    #[arg(long)]
    images: PathBuf,
    /// Annotation JSONL labeling those images.
    #[arg(long)]
    labels: PathBuf,
    /// Report JSON output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Scorer wiring.
    #[arg(long, value_enum, default_value = "toy")]
    backend: EvalBackendArg,
    /// Comma-separated metric subset: hoi, i2t, t2i, t2t, vqa (default all).
    #[arg(long)]
    metrics: Option<String>,
    /// Keep only one interaction-accuracy setting in the report.
    #[arg(long, value_enum)]
    setting: Option<SettingArg>,
    /// prompts.json from prep-data; defines the rare split by training
    /// sample counts.
    #[arg(long)]
    train_prompts: Option<PathBuf>,
    /// Caption cache JSON; read when present, updated afterwards.
    #[arg(long)]
    cache: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = match cli.command {
        Command::PrepData(args) => run_prep_data(args),
        Command::Anchors(args) => run_anchors(args),
        Command::Train(args) => run_train(args),
        Command::Generate(args) => run_generate(args),
        Command::ExtractRegions(args) => run_extract_regions(args),
        Command::Eval(args) => run_eval(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text).map_err(data_io(path))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(data_io(path))
}

fn load_annotation_records(path: &Path) -> Result<Vec<AnnotationRecord>, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!(
            "{}: annotation file not found; run `verbdiff prep-data` (for example with \
             --synthetic train8) to materialize a corpus first",
            path.display()
        )));
    }
    let outcome = load_annotations(path)?;
    for r in &outcome.rejections {
        log::warn!(
            "{}: line {} ({}): {}",
            path.display(),
            r.line,
            r.image_id,
            r.reason
        );
    }
    Ok(outcome.records)
}

fn load_image(dir: &Path, image_id: &str) -> Result<Image, CliError> {
    let path = dir.join(format!("{image_id}.png"));
    if !path.exists() {
        return Err(CliError::Data(format!(
            "{}: image for record '{image_id}' not found",
            path.display()
        )));
    }
    Image::from_png(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn parse_triplet(text: &str) -> Result<HOITriplet, CliError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 || parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!(
            "bad triplet '{text}': expected \"human,verb,object\""
        )));
    }
    Ok(HOITriplet::new(parts[0], parts[1], parts[2]))
}

/// Loads a checkpoint and rebuilds its backend: the embedded config picks
/// the backend and seed, then the trained attention tensors are imported.
fn backend_from_checkpoint(
    path: &Path,
) -> Result<(ToyBackend, TrainConfig, Checkpoint), CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!(
            "{}: checkpoint not found; run `verbdiff train` first",
            path.display()
        )));
    }
    let ckpt = Checkpoint::load(path)?;
    let config = TrainConfig::from_toml(&ckpt.config_toml)?;
    let mut backend = resolve_backend(&config.backend, config.seed)?;
    let params: BTreeMap<String, (Vec<usize>, Vec<f64>)> = ckpt
        .tensors
        .iter()
        .filter(|(name, _)| !name.starts_with("optimizer/"))
        .map(|(name, t)| (name.clone(), t.clone()))
        .collect();
    backend.denoiser.import_tensors(&params).map_err(|e| {
        CliError::Backend(format!(
            "{}: checkpoint does not fit backend '{}': {e}",
            path.display(),
            config.backend
        ))
    })?;
    Ok((backend, config, ckpt))
}

// ---------------------------------------------------------------------------
// prep-data
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PrepSummary {
    prompts_kept: usize,
    excluded_classes: usize,
    total_classes: usize,
    images: usize,
    pairs: usize,
}

fn run_prep_data(args: PrepDataArgs) -> Result<(), CliError> {
    create_dir(&args.out)?;

    let records = match args.synthetic {
        Some(fixture) => {
            let records = match fixture {
                SyntheticFixture::Demo => prep_fixture_records(),
                SyntheticFixture::Train8 => training_fixture_records(),
            };
            let ann_path = args.out.join("annotations.jsonl");
            write_annotations(&ann_path, &records)?;
            let image_dir = args.out.join("images");
            create_dir(&image_dir)?;
            for (image_id, image) in fixture_images(&records) {
                let path = image_dir.join(format!("{image_id}.png"));
                image
                    .save_png(&path)
                    .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            }
            println!("synthetic corpus: {}", ann_path.display());
            println!("images: {}", image_dir.display());
            records
        }
        None => load_annotation_records(
            args.annotations
                .as_deref()
                .expect("clap enforces annotations or synthetic"),
        )?,
    };

    let outcome = realign_outcome(&records);
    if outcome.prompts.is_empty() {
        return Err(CliError::Data(
            "no prompt classes survived realignment".to_string(),
        ));
    }
    let anchors = build_anchor_table(&outcome.prompts);
    let balance = build_balance_table(&outcome.prompts, args.balance_mode.into())?;

    write_json(&args.out.join("prompts.json"), &outcome.prompts)?;
    write_json(&args.out.join("anchors.json"), &anchors)?;
    write_json(&args.out.join("balance.json"), &balance)?;
    let summary = PrepSummary {
        prompts_kept: outcome.prompts.len(),
        excluded_classes: outcome.excluded_classes,
        total_classes: outcome.total_classes,
        images: records.len(),
        pairs: records.iter().map(|r| r.pairs.len()).sum(),
    };
    write_json(&args.out.join("summary.json"), &summary)?;

    println!("prompts kept: {}", summary.prompts_kept);
    println!(
        "excluded classes: {} (of {} total)",
        summary.excluded_classes, summary.total_classes
    );
    println!("images: {}  pairs: {}", summary.images, summary.pairs);
    println!("tables: {}", args.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// anchors
// ---------------------------------------------------------------------------

fn run_anchors(args: AnchorsArgs) -> Result<(), CliError> {
    let records = load_annotation_records(&args.annotations)?;
    let outcome = realign_outcome(&records);
    if outcome.prompts.is_empty() {
        return Err(CliError::Data(
            "no prompt classes survived realignment".to_string(),
        ));
    }
    let anchors = build_anchor_table(&outcome.prompts);
    let balance = build_balance_table(&outcome.prompts, args.balance_mode.into())?;

    for (object, entry) in &anchors.objects {
        let counts: Vec<String> = entry
            .counts
            .iter()
            .map(|(verb, n)| format!("{verb}={n}"))
            .collect();
        println!(
            "object '{object}': anchor verb '{}' ({})",
            entry.anchor_verb,
            counts.join(", ")
        );
    }
    for entry in &balance.classes {
        println!(
            "class '{}': n={} alpha={:.6}",
            entry.triplet, entry.sample_count, entry.alpha
        );
    }
    println!(
        "total samples: {}  beta: {:.6}",
        balance.total_samples, balance.beta
    );

    if let Some(out) = &args.out {
        create_dir(out)?;
        write_json(&out.join("anchors.json"), &anchors)?;
        write_json(&out.join("balance.json"), &balance)?;
        println!("tables: {}", out.display());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    // Command-line overrides win over the config file.
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.max_steps {
        config.max_steps = Some(v);
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = args.lambda_rec {
        config.lambda_rec = v;
    }
    if let Some(v) = args.lambda_rdg {
        config.lambda_rdg = v;
    }
    if let Some(v) = args.lambda_idg {
        config.lambda_idg = v;
    }
    if let Some(v) = args.backend {
        config.backend = v;
    }

    let checkpoint_path = args.run_dir.join(CHECKPOINT_FILE);
    if checkpoint_path.exists() && !args.resume {
        return Err(CliError::Data(format!(
            "{}: run directory already holds a checkpoint; pass --resume to continue it or \
             choose a fresh --run-dir",
            args.run_dir.display()
        )));
    }

    let records = load_annotation_records(&args.annotations)?;
    let mut images = BTreeMap::new();
    for record in &records {
        images.insert(
            record.image_id.clone(),
            load_image(&args.images, &record.image_id)?,
        );
    }
    let dataset = TrainDataset::build(&records, &images, config.balance_mode)?;

    let outcome = run_with_budget(&config, &dataset, &args.run_dir, args.step_budget)?;
    for r in &outcome.records {
        println!(
            "step {}/{}: total={:.6} rec={:.6} rdg={:.6} idg={:.6} class=\"{}\"",
            r.step, outcome.total_steps, r.losses.total, r.losses.rec, r.losses.rdg,
            r.losses.idg, r.prompt
        );
    }
    println!(
        "steps run: {} (total {})",
        outcome.steps_run, outcome.total_steps
    );
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    println!("metrics: {}", outcome.metrics_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct GeneratedEntry {
    file: String,
    seed: u64,
    content_hash: String,
}

#[derive(Serialize)]
struct GenerationSidecar {
    prompt: String,
    negative_prompt: String,
    steps: usize,
    base_seed: u64,
    count: u64,
    backend: String,
    checkpoint_step: u64,
    images: Vec<GeneratedEntry>,
}

fn run_generate(args: GenerateArgs) -> Result<(), CliError> {
    let (backend, config, ckpt) = backend_from_checkpoint(&args.checkpoint)?;
    let cond = match (&args.triplet, &args.prompt) {
        (Some(t), None) => backend.conditioning(&prompt_parts(&parse_triplet(t)?))?,
        (None, Some(p)) => backend.text.conditioning_plain(p)?,
        _ => unreachable!("clap enforces exactly one of --triplet/--prompt"),
    };
    create_dir(&args.out)?;

    let mut entries = Vec::new();
    for i in 0..args.count {
        let seed = args.seed.wrapping_add(i);
        let (image, _) = backend.sample_conditioned(
            &cond,
            args.steps,
            seed,
            false,
            StepAggregation::MeanOverSteps,
        )?;
        let file = format!("sample-{seed:08}.png");
        let path = args.out.join(&file);
        image
            .save_png(&path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        println!("wrote {}", path.display());
        entries.push(GeneratedEntry {
            file,
            seed,
            content_hash: format!("{:016x}", image.content_hash()),
        });
    }

    let sidecar = GenerationSidecar {
        prompt: cond.prompt.clone(),
        negative_prompt: args.negative.clone(),
        steps: args.steps,
        base_seed: args.seed,
        count: args.count,
        backend: config.backend.clone(),
        checkpoint_step: ckpt.step,
        images: entries,
    };
    let sidecar_path = args.out.join("generation.json");
    write_json(&sidecar_path, &sidecar)?;
    println!("sidecar: {}", sidecar_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// extract-regions
// ---------------------------------------------------------------------------

fn run_extract_regions(args: ExtractRegionsArgs) -> Result<(), CliError> {
    let params = RegionParams {
        exponent: args.exponent.into(),
        min_extent: args.min_extent,
    };
    let real_mode = args.annotations.is_some();
    let generated_mode = args.checkpoint.is_some() || args.triplet.is_some();
    match (real_mode, generated_mode) {
        (true, true) => Err(CliError::Usage(
            "choose one mode: --annotations [--images] for real boxes, or --checkpoint with \
             --triplet for generated attention"
                .to_string(),
        )),
        (false, false) => Err(CliError::Usage(
            "nothing to extract: pass --annotations [--images] (real boxes) or --checkpoint \
             with --triplet (generated attention)"
                .to_string(),
        )),
        (true, false) => {
            let annotations = args.annotations.as_deref().expect("checked above");
            let images = args.images.as_deref().ok_or_else(|| {
                CliError::Usage(
                    "--annotations also needs --images (the base pictures to draw over)"
                        .to_string(),
                )
            })?;
            extract_real_regions(annotations, images, &args.out, &params)
        }
        (false, true) => {
            let (checkpoint, triplet) = match (&args.checkpoint, &args.triplet) {
                (Some(c), Some(t)) => (c.as_path(), t.as_str()),
                _ => {
                    return Err(CliError::Usage(
                        "generated mode needs both --checkpoint and --triplet".to_string(),
                    ))
                }
            };
            extract_generated_region(
                checkpoint, triplet, args.seed, args.steps, &args.out, &params,
            )
        }
    }
}

/// Midpoint path: regions straight from annotated boxes, on the unit grid.
fn extract_real_regions(
    annotations: &Path,
    images: &Path,
    out: &Path,
    params: &RegionParams,
) -> Result<(), CliError> {
    let records = load_annotation_records(annotations)?;
    create_dir(out)?;
    let mut written = 0usize;
    for record in &records {
        let base = load_image(images, &record.image_id)?.to_rgba();
        for (k, pair) in record.pairs.iter().enumerate() {
            let region = gt_interaction_region(&pair.human_box, &pair.object_box, params);
            let (hx, hy) = pair.human_box.center();
            let (ox, oy) = pair.object_box.center();
            let c_rel = Centroid::new((hx + ox) / 2.0, (hy + oy) / 2.0);
            let image_id = if record.pairs.len() > 1 {
                format!("{}-{k}", record.image_id)
            } else {
                record.image_id.clone()
            };
            let sidecar = RegionSidecar {
                image_id,
                grid: (1, 1),
                c_h: Centroid::new(hx, hy),
                // No attention on the real path: the relation centroid is
                // the box-center midpoint itself.
                c_r: c_rel.clone(),
                c_o: Centroid::new(ox, oy),
                c_rel,
                half_extent: region.half_extent,
                clipped_box: region.clipped_box.clone(),
            };
            write_region_debug(out, &base, &sidecar).map_err(data_io(out))?;
            written += 1;
        }
    }
    if written == 0 {
        return Err(CliError::Data(
            "annotations contain no interaction pairs".to_string(),
        ));
    }
    println!("wrote {written} region overlays to {}", out.display());
    Ok(())
}

/// Centroid path: sample with attention capture and extract the region from
/// the aggregated role maps.
fn extract_generated_region(
    checkpoint: &Path,
    triplet_text: &str,
    seed: u64,
    steps: usize,
    out: &Path,
    params: &RegionParams,
) -> Result<(), CliError> {
    let triplet = parse_triplet(triplet_text)?;
    let (backend, _, _) = backend_from_checkpoint(checkpoint)?;
    let cond = backend.conditioning(&prompt_parts(&triplet))?;
    let (image, stack) =
        backend.sample_conditioned(&cond, steps, seed, true, StepAggregation::MeanOverSteps)?;
    let stack = stack.ok_or_else(|| {
        CliError::Backend("sampler did not capture attention".to_string())
    })?;

    let grid = stack.resolution();
    let c_h = centroid(&aggregate_token_map(&stack, Role::Human)?)?;
    let c_r = centroid(&aggregate_token_map(&stack, Role::Verb)?)?;
    let c_o = centroid(&aggregate_token_map(&stack, Role::Object)?)?;
    let c_rel = interaction_center(&c_h, &c_r, &c_o);
    let region = interaction_region(&c_rel, &c_h, &c_o, params, grid);

    create_dir(out)?;
    let sidecar = RegionSidecar {
        image_id: format!("gen-{seed:08}"),
        grid,
        c_h,
        c_r,
        c_o,
        c_rel,
        half_extent: region.half_extent,
        clipped_box: region.clipped_box.clone(),
    };
    write_region_debug(out, &image.to_rgba(), &sidecar).map_err(data_io(out))?;
    println!(
        "wrote region overlay for \"{}\" (seed {seed}) to {}",
        cond.prompt,
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Metric families selectable via --metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum MetricGroup {
    T2t,
    T2i,
    Hoi,
    Vqa,
    I2t,
}

const VALID_METRICS: &str = "hoi, i2t, t2i, t2t, vqa";

impl MetricGroup {
    fn parse(text: &str) -> Result<Self, CliError> {
        match text {
            "t2t" => Ok(MetricGroup::T2t),
            "t2i" => Ok(MetricGroup::T2i),
            "hoi" => Ok(MetricGroup::Hoi),
            "vqa" => Ok(MetricGroup::Vqa),
            "i2t" => Ok(MetricGroup::I2t),
            other => Err(CliError::Usage(format!(
                "unknown metric '{other}'; valid metrics: {VALID_METRICS}"
            ))),
        }
    }

    fn covers(self, key: &str) -> bool {
        match self {
            MetricGroup::T2t => key.starts_with("t2t_"),
            MetricGroup::T2i => key == "t2i",
            MetricGroup::Hoi => key.starts_with("hoi_"),
            MetricGroup::Vqa => key == "vqa",
            MetricGroup::I2t => key == "i2t_align",
        }
    }
}

fn parse_metrics(text: Option<&str>) -> Result<Option<BTreeSet<MetricGroup>>, CliError> {
    let Some(text) = text else { return Ok(None) };
    let mut set = BTreeSet::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        set.insert(MetricGroup::parse(part)?);
    }
    if set.is_empty() {
        return Err(CliError::Usage(format!(
            "--metrics selected nothing; valid metrics: {VALID_METRICS}"
        )));
    }
    Ok(Some(set))
}

fn filter_report(
    mut report: EvalReport,
    metrics: &Option<BTreeSet<MetricGroup>>,
    setting: Option<SettingArg>,
) -> Result<EvalReport, CliError> {
    if let Some(s) = setting {
        let key = s.score_key();
        if s.is_rare() && !report.scores.contains_key(key) {
            return Err(CliError::Data(format!(
                "setting '{key}' has no score: the training distribution has no rare classes \
                 among the evaluated ones"
            )));
        }
        report.scores.retain(|k, _| !k.starts_with("hoi_") || k == key);
    }
    if let Some(set) = metrics {
        report
            .scores
            .retain(|k, _| set.iter().any(|g| g.covers(k)));
        if !set.contains(&MetricGroup::Hoi) {
            report.per_class_accuracy.clear();
            report.rare_classes.clear();
        }
    }
    Ok(report)
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let metric_set = parse_metrics(args.metrics.as_deref())?;

    let records = load_annotation_records(&args.labels)?;
    let mut items = Vec::new();
    for record in &records {
        let image = load_image(&args.images, &record.image_id)?;
        for pair in &record.pairs {
            items.push(EvalItem {
                triplet: pair.triplet.clone(),
                prompt: render_prompt(&pair.triplet),
                image: image.clone(),
            });
        }
    }
    if items.is_empty() {
        return Err(CliError::Data(
            "labels contain no interaction pairs".to_string(),
        ));
    }

    let training_counts: BTreeMap<HOITriplet, u64> = match &args.train_prompts {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(data_io(path))?;
            let prompts: Vec<PromptRecord> = serde_json::from_str(&text)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            prompts
                .into_iter()
                .map(|p| (p.triplet, p.sample_count))
                .collect()
        }
        None => BTreeMap::new(),
    };

    let mut cache = match &args.cache {
        Some(path) if path.exists() => CaptionCache::load(path)?,
        _ => CaptionCache::new(),
    };

    let report = match args.backend {
        EvalBackendArg::Oracle => {
            let oracle = OracleSuite::new(&items);
            let sentence = oracle.as_sentence_like();
            let suite = EvalSuite {
                captioner: &oracle,
                clip_like: &oracle,
                sentence_like: &sentence,
                detector: &oracle,
                vqa: &oracle,
            };
            evaluate(&items, &training_counts, &suite, &mut cache)?
        }
        EvalBackendArg::Toy => {
            let captioner = ToyCaptioner::default();
            let clip = resolve_similarity_backend("clip_like")?;
            let sentence = resolve_similarity_backend("sentence_like")?;
            // The toy wiring ships no detector or VQA model: the detector
            // reports nothing (every class a miss) and VQA answers at
            // chance. Honest floors, not simulated scores.
            let detector = ScriptedDetector {
                id: "null-detector".to_string(),
                by_hash: BTreeMap::new(),
            };
            let vqa = ScriptedVqa {
                id: "chance-vqa".to_string(),
                by_hash: BTreeMap::new(),
                fallback: 0.5,
            };
            let suite = EvalSuite {
                captioner: &captioner,
                clip_like: clip.as_ref(),
                sentence_like: sentence.as_ref(),
                detector: &detector,
                vqa: &vqa,
            };
            evaluate(&items, &training_counts, &suite, &mut cache)?
        }
    };
    let report = filter_report(report, &metric_set, args.setting)?;

    if let Some(path) = &args.cache {
        cache.save(path)?;
    }

    print!("{}", report.render_table());
    println!(
        "captions: {} hits, {} misses",
        cache.hits(),
        cache.misses()
    );
    println!("wall time: {} ms", started.elapsed().as_millis());
    if let Some(out) = &args.out {
        report.save(out)?;
        println!("report: {}", out.display());
    }
    Ok(())
}
