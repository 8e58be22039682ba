//! Command-line front end. Every experiment subcommand reads an optional
//! JSON config (the [`ExperimentConfig`] schema) and applies kebab-case flag
//! overrides on top.
//!
//! Exit codes: 0 success, 1 invalid input or config, 2 runtime failure.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::corpus::{self, Category, Dimension};
use crate::harness::{self, Dataset, ExperimentConfig, HarnessError, TaskSelection};
use crate::linmod::ProbeModel;
use crate::metrics::BootstrapUnit;
use crate::synth::{self, SynthError, SynthSpec};

pub const SEED_ENV: &str = "VQD_PROBE_SEED";

#[derive(Debug, Parser)]
#[command(name = "vqd-probe", version, about = "Linear probes for voice quality dimensions on frozen speech embeddings")]
pub struct Cli {
    /// Random seed; falls back to the config file, then $VQD_PROBE_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Maximum number of concurrent probe trainings.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Validate inputs and print the execution plan without writing anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Annotation statistics: correlations, histograms, eligibility, splits.
    Stats(ExperimentArgs),
    /// Train probes and save them under the models directory.
    Train(ExperimentArgs),
    /// Evaluate saved probes on the test split (table1.csv).
    Evaluate(ExperimentArgs),
    /// Train-category × eval-category generalization grid (table2.csv).
    Generalize(ExperimentArgs),
    /// Zero-shot severity AUCs on an external dataset.
    Zeroshot(ZeroShotArgs),
    /// Mean predictions per emotion on an affect dataset.
    Affect(AffectArgs),
    /// Generate a synthetic corpus with planted signal.
    Synth(SynthArgs),
    /// Print a summary of a saved model.
    InspectModel(InspectArgs),
}

fn parse_backend_path(s: &str) -> Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() && !v.is_empty() => Ok((k.to_string(), PathBuf::from(v))),
        _ => Err(format!("expected BACKEND=PATH, got `{s}`")),
    }
}

fn parse_task(s: &str) -> Result<TaskSelection, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown task `{s}` (regression, classification, both)"))
}

fn parse_unit(s: &str) -> Result<BootstrapUnit, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown bootstrap unit `{s}` (row, speaker)"))
}

#[derive(Debug, Clone, Default, Args)]
pub struct ExperimentArgs {
    /// JSON config file; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest_path: Option<PathBuf>,
    /// BACKEND=PATH, repeatable.
    #[arg(long = "embedding-paths", value_parser = parse_backend_path)]
    pub embedding_paths: Vec<(String, PathBuf)>,
    #[arg(long, alias = "out")]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub models_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub dimensions: Vec<Dimension>,
    #[arg(long, value_delimiter = ',')]
    pub train_categories: Vec<Category>,
    #[arg(long, value_delimiter = ',')]
    pub eval_categories: Vec<Category>,
    #[arg(long, value_parser = parse_task)]
    pub task: Option<TaskSelection>,
    #[arg(long)]
    pub n_boot: Option<usize>,
    #[arg(long, value_parser = parse_unit)]
    pub bootstrap_unit: Option<BootstrapUnit>,
}

#[derive(Debug, Clone, Args)]
pub struct ZeroShotArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    #[arg(long)]
    pub dataset_name: Option<String>,
    #[arg(long)]
    pub zeroshot_manifest: Option<PathBuf>,
    /// BACKEND=PATH, repeatable.
    #[arg(long = "zeroshot-embeddings", value_parser = parse_backend_path)]
    pub zeroshot_embeddings: Vec<(String, PathBuf)>,
    /// Score with classifier probabilities instead of regression outputs.
    #[arg(long)]
    pub use_classifier: bool,
    /// Severities at or above this value count as positive.
    #[arg(long)]
    pub severity_cut: Option<u32>,
}

#[derive(Debug, Clone, Args)]
pub struct AffectArgs {
    #[command(flatten)]
    pub experiment: ExperimentArgs,
    #[arg(long)]
    pub affect_manifest: Option<PathBuf>,
    /// BACKEND=PATH, repeatable.
    #[arg(long = "affect-embeddings", value_parser = parse_backend_path)]
    pub affect_embeddings: Vec<(String, PathBuf)>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output directory for manifest.csv and <backend>.vqde.
    #[arg(long, alias = "output-dir")]
    pub out: PathBuf,
    /// Full generator spec as JSON; flags below override it.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub n_speakers: usize,
    #[arg(long, default_value_t = 10)]
    pub utterances_per_speaker: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    /// Rating noise; defaults to the level giving latent/score correlation 0.95.
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    /// Ratings carry no signal.
    #[arg(long)]
    pub null: bool,
    #[arg(long)]
    pub backend_name: Option<String>,
    #[arg(long)]
    pub dimension_correlation: Option<f64>,
    #[arg(long)]
    pub severity_levels: Option<u32>,
    #[arg(long)]
    pub emotion_shift: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
    /// Number of largest-magnitude weights to list.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
}

/// Failure of a CLI run, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    /// Single-line message.
    pub fn message(&self) -> String {
        let (CliError::Validation(m) | CliError::Runtime(m)) = self;
        m.split_whitespace().collect::<Vec<_>>().join(" ")
    }
}

fn is_validation(e: &HarnessError) -> bool {
    match e {
        HarnessError::ConfigInvalid(_)
        | HarnessError::MissingPath(_)
        | HarnessError::Corpus(_)
        | HarnessError::EmptyCategory { .. }
        | HarnessError::MissingModel { .. }
        | HarnessError::NonBinarySeverity(_)
        | HarnessError::Json(_) => true,
        HarnessError::Embed(e) => !matches!(e, crate::embedstore::EmbedError::EmptyJoin),
        HarnessError::ModelIo(_) => true,
        HarnessError::Probe { source, .. } => is_validation(source),
        _ => false,
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        if is_validation(&e) {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidSpec(_) => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn seed_from_env() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Validation(format!("{SEED_ENV} is not an unsigned integer: `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn read_json_file(path: &Path) -> CliResult<serde_json::Value> {
    harness::require_path(path)?;
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Resolves the effective config: file (if any), then flag overrides, then
/// the seed chain flag → config file → environment → 0.
pub fn resolve_config(args: &ExperimentArgs, seed: Option<u64>, jobs: Option<usize>) -> CliResult<ExperimentConfig> {
    let (mut cfg, file_has_seed) = match &args.config {
        Some(path) => {
            let value = read_json_file(path)?;
            let has_seed = value.get("seed").is_some();
            let cfg: ExperimentConfig = serde_json::from_value(value)
                .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
            (cfg, has_seed)
        }
        None => {
            let manifest = args
                .manifest_path
                .clone()
                .ok_or_else(|| CliError::Validation("--manifest-path or --config is required".into()))?;
            let out = args
                .output_dir
                .clone()
                .ok_or_else(|| CliError::Validation("--output-dir or --config is required".into()))?;
            (ExperimentConfig::new(manifest, out), false)
        }
    };
    if let Some(p) = &args.manifest_path {
        cfg.manifest_path = p.clone();
    }
    if let Some(p) = &args.output_dir {
        cfg.output_dir = p.clone();
    }
    if !args.embedding_paths.is_empty() {
        cfg.embedding_paths = args.embedding_paths.iter().cloned().collect::<BTreeMap<_, _>>();
    }
    if let Some(p) = &args.models_dir {
        cfg.models_dir = Some(p.clone());
    }
    if !args.dimensions.is_empty() {
        cfg.dimensions = args.dimensions.clone();
    }
    if !args.train_categories.is_empty() {
        cfg.train_categories = Some(args.train_categories.clone());
    }
    if !args.eval_categories.is_empty() {
        cfg.eval_categories = Some(args.eval_categories.clone());
    }
    if let Some(t) = args.task {
        cfg.task = t;
    }
    if let Some(n) = args.n_boot {
        cfg.n_boot = n;
    }
    if let Some(u) = args.bootstrap_unit {
        cfg.bootstrap_unit = u;
    }
    if jobs.is_some() {
        cfg.jobs = jobs;
    }
    cfg.seed = match (seed, file_has_seed) {
        (Some(s), _) => s,
        (None, true) => cfg.seed,
        (None, false) => seed_from_env()?.unwrap_or(0),
    };
    cfg.validate_shape()?;
    Ok(cfg)
}

fn print_plan(command: &str, plan: serde_json::Value) -> CliResult<()> {
    let out = json!({ "command": command, "dry_run": true, "plan": plan });
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", serde_json::to_string_pretty(&out).expect("plan serializes"))?;
    Ok(())
}

fn probe_plan(cfg: &ExperimentConfig) -> serde_json::Value {
    let mut probes = Vec::new();
    for backend in cfg.embedding_paths.keys() {
        for d in &cfg.dimensions {
            for t in cfg.task.tasks() {
                probes.push(format!("{backend}/{d}/{t}"));
            }
        }
    }
    json!({ "config": cfg, "probes": probes })
}

fn cmd_stats(cli: &Cli, args: &ExperimentArgs) -> CliResult<()> {
    let cfg = resolve_config(args, cli.seed, cli.jobs)?;
    harness::require_path(&cfg.manifest_path)?;
    let m = corpus::load_manifest(&cfg.manifest_path).map_err(HarnessError::from)?;
    if cli.dry_run {
        return print_plan(
            "stats",
            json!({ "config": cfg, "records": m.len(), "outputs": [
                "annotation_correlations.csv", "score_histograms.csv",
                "dimension_eligibility.csv", "stats_summary.json", "run_meta.json"] }),
        );
    }
    let report = corpus::check_speaker_disjoint(&m);
    if !report.ok {
        log::warn!("speakers appear in more than one split: {}", report.offending_speakers.join(", "));
    }
    harness::write_stats(&m, &cfg.output_dir)?;
    harness::write_run_meta(&cfg, "stats")?;
    Ok(())
}

fn cmd_train(cli: &Cli, args: &ExperimentArgs) -> CliResult<()> {
    let cfg = resolve_config(args, cli.seed, cli.jobs)?;
    cfg.validate()?;
    if cli.dry_run {
        return print_plan("train", probe_plan(&cfg));
    }
    let data = Dataset::load(&cfg.manifest_path, &cfg.embedding_paths)?;
    let probes = harness::train_all(&cfg, &data)?;
    for p in &probes {
        if !p.model.train_meta.converged {
            log::warn!(
                "{}/{}/{} did not converge at lambda {}",
                p.model.backend_name,
                p.model.dimension,
                p.model.task,
                p.model.lambda
            );
        }
    }
    harness::write_run_meta(&cfg, "train")?;
    Ok(())
}

fn cmd_evaluate(cli: &Cli, args: &ExperimentArgs) -> CliResult<()> {
    let cfg = resolve_config(args, cli.seed, cli.jobs)?;
    cfg.validate()?;
    let models_dir = cfg.models_dir();
    harness::require_path(&models_dir)?;
    let tasks = cfg.task.tasks();
    let models: Vec<ProbeModel> = harness::load_models(&models_dir)?
        .into_iter()
        .filter(|m| {
            cfg.embedding_paths.contains_key(&m.backend_name)
                && cfg.dimensions.contains(&m.dimension)
                && tasks.contains(&m.task)
        })
        .collect();
    // every requested probe must have been trained
    for backend in cfg.embedding_paths.keys() {
        for &dimension in &cfg.dimensions {
            for &task in &tasks {
                if !models.iter().any(|m| &m.backend_name == backend && m.dimension == dimension && m.task == task) {
                    return Err(HarnessError::MissingModel {
                        backend: backend.clone(),
                        dimension,
                        task,
                    }
                    .into());
                }
            }
        }
    }
    if cli.dry_run {
        return print_plan("evaluate", probe_plan(&cfg));
    }
    let data = Dataset::load(&cfg.manifest_path, &cfg.embedding_paths)?;
    let mut rows = harness::evaluate_all(&cfg, &data, &models)?;
    rows.sort_by(|a, b| {
        let key = |r: &crate::metrics::ReportRow| {
            (
                r.backend.clone(),
                r.dimension.parse::<Dimension>().map_or(usize::MAX, Dimension::index),
                r.report.metric as usize,
            )
        };
        key(a).cmp(&key(b))
    });
    std::fs::create_dir_all(&cfg.output_dir)?;
    harness::write_report_file(&cfg.output_dir.join("table1.csv"), &rows)?;
    harness::write_run_meta(&cfg, "evaluate")?;
    Ok(())
}

fn cmd_generalize(cli: &Cli, args: &ExperimentArgs) -> CliResult<()> {
    let cfg = resolve_config(args, cli.seed, cli.jobs)?;
    cfg.validate()?;
    if cli.dry_run {
        let cells: Vec<String> = harness::TrainGroup::ALL
            .iter()
            .flat_map(|g| Category::ALL.iter().map(move |e| format!("{} -> {e}", g.label())))
            .collect();
        return print_plan("generalize", json!({ "config": cfg, "cells": cells }));
    }
    harness::run_table2(&cfg)?;
    Ok(())
}

fn cmd_zeroshot(cli: &Cli, args: &ZeroShotArgs) -> CliResult<()> {
    let mut cfg = resolve_config(&args.experiment, cli.seed, cli.jobs)?;
    let mut zs = cfg.zeroshot.take().unwrap_or_else(|| harness::ZeroShotConfig {
        dataset_name: String::new(),
        manifest_path: PathBuf::new(),
        embedding_paths: BTreeMap::new(),
        use_classifier: false,
        severity_cut: None,
    });
    if let Some(n) = &args.dataset_name {
        zs.dataset_name = n.clone();
    }
    if let Some(p) = &args.zeroshot_manifest {
        zs.manifest_path = p.clone();
    }
    if !args.zeroshot_embeddings.is_empty() {
        zs.embedding_paths = args.zeroshot_embeddings.iter().cloned().collect();
    }
    zs.use_classifier |= args.use_classifier;
    if args.severity_cut.is_some() {
        zs.severity_cut = args.severity_cut;
    }
    if zs.dataset_name.is_empty() {
        return Err(CliError::Validation("--dataset-name is required".into()));
    }
    if zs.manifest_path.as_os_str().is_empty() {
        return Err(CliError::Validation("--zeroshot-manifest is required".into()));
    }
    if zs.embedding_paths.is_empty() {
        return Err(CliError::Validation("--zeroshot-embeddings is required".into()));
    }
    harness::require_path(&zs.manifest_path)?;
    for p in zs.embedding_paths.values() {
        harness::require_path(p)?;
    }
    harness::require_path(&cfg.models_dir())?;
    cfg.zeroshot = Some(zs);
    if cli.dry_run {
        return print_plan("zeroshot", json!({ "config": cfg }));
    }
    harness::run_zeroshot_from_config(&cfg)?;
    Ok(())
}

fn cmd_affect(cli: &Cli, args: &AffectArgs) -> CliResult<()> {
    let mut cfg = resolve_config(&args.experiment, cli.seed, cli.jobs)?;
    let mut af = cfg.affect.take().unwrap_or_else(|| harness::AffectConfig {
        manifest_path: PathBuf::new(),
        embedding_paths: BTreeMap::new(),
    });
    if let Some(p) = &args.affect_manifest {
        af.manifest_path = p.clone();
    }
    if !args.affect_embeddings.is_empty() {
        af.embedding_paths = args.affect_embeddings.iter().cloned().collect();
    }
    if af.manifest_path.as_os_str().is_empty() {
        return Err(CliError::Validation("--affect-manifest is required".into()));
    }
    if af.embedding_paths.is_empty() {
        return Err(CliError::Validation("--affect-embeddings is required".into()));
    }
    harness::require_path(&af.manifest_path)?;
    for p in af.embedding_paths.values() {
        harness::require_path(p)?;
    }
    harness::require_path(&cfg.models_dir())?;
    cfg.affect = Some(af);
    if cli.dry_run {
        return print_plan("affect", json!({ "config": cfg }));
    }
    harness::run_affect_from_config(&cfg)?;
    Ok(())
}

fn synth_spec(cli: &Cli, args: &SynthArgs) -> CliResult<SynthSpec> {
    let mut spec = match &args.spec {
        Some(p) => serde_json::from_value(read_json_file(p)?)
            .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?,
        None => {
            let seed = match cli.seed {
                Some(s) => s,
                None => seed_from_env()?.unwrap_or(0),
            };
            let sigma = args.noise_sigma.unwrap_or_else(|| SynthSpec::sigma_for_correlation(0.95));
            if args.null {
                SynthSpec::null(args.n_speakers, args.utterances_per_speaker, args.dim, seed, sigma)
            } else {
                SynthSpec::planted(args.n_speakers, args.utterances_per_speaker, args.dim, seed, sigma)
            }
        }
    };
    if args.spec.is_some() {
        if let Some(s) = cli.seed {
            spec.seed = s;
        }
        if let Some(s) = args.noise_sigma {
            spec.noise_sigma = s;
        }
    }
    if let Some(b) = &args.backend_name {
        spec.backend_name = b.clone();
    }
    if let Some(c) = args.dimension_correlation {
        spec.dimension_correlation = c;
    }
    if args.severity_levels.is_some() {
        spec.severity_levels = args.severity_levels;
    }
    if args.emotion_shift.is_some() {
        spec.emotion_shift = args.emotion_shift;
    }
    spec.validate()?;
    Ok(spec)
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> CliResult<()> {
    let spec = synth_spec(cli, args)?;
    if cli.dry_run {
        return print_plan(
            "synth",
            json!({ "spec": spec, "out": args.out, "outputs": ["manifest.csv", format!("{}.vqde", spec.backend_name)] }),
        );
    }
    let corpus = synth::generate(&spec)?;
    corpus.write_to(&args.out)?;
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> CliResult<()> {
    harness::require_path(&args.path)?;
    let m = ProbeModel::load(&args.path).map_err(HarnessError::from)?;
    let mut order: Vec<usize> = (0..m.weights.len()).filter(|&i| m.weights[i] != 0.0).collect();
    order.sort_by(|&a, &b| m.weights[b].abs().total_cmp(&m.weights[a].abs()).then(a.cmp(&b)));
    let top: Vec<_> = order
        .iter()
        .take(args.top)
        .map(|&i| json!({ "index": i, "weight": m.weights[i] }))
        .collect();
    let summary = json!({
        "task": m.task,
        "backend_name": m.backend_name,
        "dimension": m.dimension,
        "dim": m.dim(),
        "lambda": m.lambda,
        "intercept": m.intercept,
        "n_nonzero": m.n_nonzero(),
        "binarization_threshold": m.binarization_threshold,
        "train_meta": m.train_meta,
        "top_weights": top,
    });
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{}", serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(())
}

/// Runs a parsed invocation.
pub fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Stats(a) => cmd_stats(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Evaluate(a) => cmd_evaluate(cli, a),
        Command::Generalize(a) => cmd_generalize(cli, a),
        Command::Zeroshot(a) => cmd_zeroshot(cli, a),
        Command::Affect(a) => cmd_affect(cli, a),
        Command::Synth(a) => cmd_synth(cli, a),
        Command::InspectModel(a) => cmd_inspect(a),
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("VQD_PROBE_LOG")
        .format(|buf, record| writeln!(buf, "{}: {}", record.level().as_str().to_lowercase(), record.args()))
        .try_init();
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    let first = e.to_string();
                    let line = first.lines().next().unwrap_or("invalid arguments");
                    eprintln!("{}", if line.starts_with("error:") { line.to_string() } else { format!("error: {line}") });
                    1
                }
            };
        }
    };
    init_logging(cli.verbose);
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
