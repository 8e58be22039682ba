//! Experiment drivers: in-domain probe training and evaluation, the
//! train-category × eval-category generalization grid, zero-shot severity
//! transfer, severity-stratified prediction summaries and affect profiles.
//!
//! Independent probe fits run on a rayon pool; results are collated in a
//! fixed (backend, dimension, task) order so outputs do not depend on
//! scheduling.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{self, Category, CorpusError, Dimension, Emotion, Manifest, Split};
use crate::embedstore::{self, EmbedError, EmbeddingTable, RecordFilter};
use crate::linmod::{FitError, ModelIoError, ProbeModel, ProbeTask};
use crate::metrics::{self, BootstrapConfig, BootstrapUnit, MeanStd, MetricError, MetricKind, MetricReport, ReportRow};
use crate::modelsel::{self, ProbeContext, SelectError, SelectionResult};

/// Label of the composite zero-shot row.
pub const SUM_LABEL: &str = "sum_all_dims";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("path does not exist: {}", .0.display())]
    MissingPath(PathBuf),
    #[error("category `{category}` has no records in the {split} split")]
    EmptyCategory { category: Category, split: Split },
    #[error("no {task} model for dimension `{dimension}` and backend `{backend}`")]
    MissingModel {
        backend: String,
        dimension: Dimension,
        task: ProbeTask,
    },
    #[error("severity value {0} is not binary; pass a severity cut")]
    NonBinarySeverity(u32),
    #[error("no records with a severity label")]
    NoSeverity,
    #[error("class probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("probabilities and class values differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("negative class probability {0}")]
    NegativeProbability(f64),
    #[error("{context}: {source}")]
    Probe {
        context: String,
        #[source]
        source: Box<HarnessError>,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    ModelIo(#[from] ModelIoError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

impl HarnessError {
    fn in_probe(self, backend: &str, dimension: Dimension, task: ProbeTask) -> Self {
        HarnessError::Probe {
            context: format!("{backend}/{dimension}/{task}"),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskSelection {
    Regression,
    Classification,
    #[default]
    Both,
}

impl TaskSelection {
    pub fn tasks(self) -> Vec<ProbeTask> {
        match self {
            TaskSelection::Regression => vec![ProbeTask::Regression],
            TaskSelection::Classification => vec![ProbeTask::Classification],
            TaskSelection::Both => vec![ProbeTask::Regression, ProbeTask::Classification],
        }
    }
}

fn all_dimensions() -> Vec<Dimension> {
    Dimension::ALL.to_vec()
}

fn default_n_boot() -> usize {
    1000
}

/// External dataset used for zero-shot severity evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotConfig {
    pub dataset_name: String,
    pub manifest_path: PathBuf,
    pub embedding_paths: BTreeMap<String, PathBuf>,
    /// Score with classification probabilities instead of regression outputs.
    #[serde(default)]
    pub use_classifier: bool,
    /// Severity values `>=` this are positive. Without it the manifest must
    /// already hold 0/1 severities.
    #[serde(default)]
    pub severity_cut: Option<u32>,
}

/// Emotion-labelled dataset for affect profiling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffectConfig {
    pub manifest_path: PathBuf,
    pub embedding_paths: BTreeMap<String, PathBuf>,
}

/// Declarative description of a run. Field names double as the JSON config
/// schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifest_path: PathBuf,
    /// Backend name → `VQDE` file.
    #[serde(default)]
    pub embedding_paths: BTreeMap<String, PathBuf>,
    #[serde(default = "all_dimensions")]
    pub dimensions: Vec<Dimension>,
    /// `None` trains on every category.
    #[serde(default)]
    pub train_categories: Option<Vec<Category>>,
    #[serde(default)]
    pub eval_categories: Option<Vec<Category>>,
    #[serde(default)]
    pub task: TaskSelection,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_boot")]
    pub n_boot: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub bootstrap_unit: BootstrapUnit,
    /// Concurrent probe trainings; defaults to the number of processors.
    #[serde(default)]
    pub jobs: Option<usize>,
    /// Where trained models are written and read; defaults to
    /// `<output_dir>/models`.
    #[serde(default)]
    pub models_dir: Option<PathBuf>,
    #[serde(default)]
    pub zeroshot: Option<ZeroShotConfig>,
    #[serde(default)]
    pub affect: Option<AffectConfig>,
}

impl ExperimentConfig {
    pub fn new(manifest_path: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            manifest_path: manifest_path.into(),
            embedding_paths: BTreeMap::new(),
            dimensions: all_dimensions(),
            train_categories: None,
            eval_categories: None,
            task: TaskSelection::Both,
            seed: 0,
            n_boot: default_n_boot(),
            output_dir: output_dir.into(),
            bootstrap_unit: BootstrapUnit::Row,
            jobs: None,
            models_dir: None,
            zeroshot: None,
            affect: None,
        }
    }

    pub fn models_dir(&self) -> PathBuf {
        self.models_dir.clone().unwrap_or_else(|| self.output_dir.join("models"))
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig::new(self.n_boot, self.seed)
    }

    /// Checks the parts of the config that do not require reading data.
    pub fn validate_shape(&self) -> Result<()> {
        if self.dimensions.is_empty() {
            return Err(HarnessError::ConfigInvalid("dimensions must not be empty".into()));
        }
        for (name, cats) in [("train_categories", &self.train_categories), ("eval_categories", &self.eval_categories)] {
            if cats.as_ref().is_some_and(Vec::is_empty) {
                return Err(HarnessError::ConfigInvalid(format!("{name} must not be empty")));
            }
        }
        if self.n_boot == 0 {
            return Err(HarnessError::ConfigInvalid("n_boot must be positive".into()));
        }
        if self.jobs == Some(0) {
            return Err(HarnessError::ConfigInvalid("jobs must be positive".into()));
        }
        Ok(())
    }

    /// Shape checks plus existence of the manifest and embedding files.
    pub fn validate(&self) -> Result<()> {
        self.validate_shape()?;
        if self.embedding_paths.is_empty() {
            return Err(HarnessError::ConfigInvalid("embedding_paths must not be empty".into()));
        }
        require_path(&self.manifest_path)?;
        for p in self.embedding_paths.values() {
            require_path(p)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

pub fn require_path(p: &Path) -> Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(HarnessError::MissingPath(p.to_path_buf()))
    }
}

/// A manifest with its embedding tables, keyed by backend name.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub tables: BTreeMap<String, EmbeddingTable>,
}

impl Dataset {
    pub fn load(manifest_path: &Path, embedding_paths: &BTreeMap<String, PathBuf>) -> Result<Self> {
        require_path(manifest_path)?;
        let manifest = corpus::load_manifest(manifest_path)?;
        let mut tables = BTreeMap::new();
        for (backend, path) in embedding_paths {
            require_path(path)?;
            let t = embedstore::read_table(path)?;
            if t.backend_name() != backend {
                warn!(
                    "embedding file {} declares backend `{}`, using config name `{backend}`",
                    path.display(),
                    t.backend_name()
                );
            }
            tables.insert(backend.clone(), t);
        }
        Ok(Self { manifest, tables })
    }

    pub fn table(&self, backend: &str) -> Result<&EmbeddingTable> {
        self.tables
            .get(backend)
            .ok_or_else(|| HarnessError::ConfigInvalid(format!("no embeddings for backend `{backend}`")))
    }
}

fn run_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| HarnessError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

/// A trained probe and its selection trace.
#[derive(Debug, Clone)]
pub struct TrainedProbe {
    pub model: ProbeModel,
    pub selection: SelectionResult,
}

fn split_filter(split: Split, categories: Option<&[Category]>) -> RecordFilter {
    RecordFilter::split(split).with_categories(categories.map(<[Category]>::to_vec))
}

/// Trains one probe on the train split, selecting λ on the validation
/// split, both restricted to `categories`.
pub fn train_probe(
    manifest: &Manifest,
    table: &EmbeddingTable,
    backend: &str,
    dimension: Dimension,
    task: ProbeTask,
    categories: Option<&[Category]>,
    seed: u64,
) -> Result<TrainedProbe> {
    let train = embedstore::join(manifest, table, dimension, &split_filter(Split::Train, categories))?;
    let val = embedstore::join(manifest, table, dimension, &split_filter(Split::Validation, categories))
        .map_err(|e| match e {
            EmbedError::EmptyJoin => HarnessError::Select(SelectError::EmptyValidation),
            e => e.into(),
        })?;
    let ctx = ProbeContext {
        backend_name: backend.to_string(),
        dimension,
        seed,
    };
    let (selection, model) = modelsel::select_lambda(&train, &val, task, None, &ctx)?;
    Ok(TrainedProbe { model, selection })
}

fn speaker_clusters(speakers: &[String]) -> Vec<usize> {
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    speakers
        .iter()
        .map(|s| {
            let next = ids.len();
            *ids.entry(s.as_str()).or_insert(next)
        })
        .collect()
}

fn bootstrap_rows(
    kind: MetricKind,
    pred: &[f64],
    truth: &[f64],
    speakers: &[String],
    unit: BootstrapUnit,
    boot: &BootstrapConfig,
) -> Result<MetricReport> {
    let clusters = match unit {
        BootstrapUnit::Row => None,
        BootstrapUnit::Speaker => Some(speaker_clusters(speakers)),
    };
    Ok(metrics::bootstrap_metric(kind, pred, truth, clusters.as_deref(), boot)?)
}

/// Test-split metric of a probe: Spearman for regression, AUC of the
/// linear score for classification, with a bootstrap interval.
pub fn evaluate_probe(
    model: &ProbeModel,
    manifest: &Manifest,
    table: &EmbeddingTable,
    categories: Option<&[Category]>,
    unit: BootstrapUnit,
    boot: &BootstrapConfig,
) -> Result<ReportRow> {
    let test = embedstore::join(manifest, table, model.dimension, &split_filter(Split::Test, categories))?;
    let score = model.decision_function(test.x.view())?;
    let report = match model.task {
        ProbeTask::Regression => bootstrap_rows(MetricKind::Spearman, &score, &test.y, &test.speakers, unit, boot)?,
        ProbeTask::Classification => {
            let t = model.binarization_threshold.expect("validated classification model");
            let labels: Vec<f64> = test
                .scores()
                .into_iter()
                .map(|s| f64::from(u8::from(modelsel::binarize(s, t))))
                .collect();
            bootstrap_rows(MetricKind::Auc, &score, &labels, &test.speakers, unit, boot)?
        }
    };
    Ok(ReportRow {
        backend: model.backend_name.clone(),
        dimension: model.dimension.to_string(),
        report,
    })
}

fn probe_jobs(cfg: &ExperimentConfig) -> Vec<(String, Dimension, ProbeTask)> {
    let mut jobs = Vec::new();
    for backend in cfg.embedding_paths.keys() {
        for &dimension in &cfg.dimensions {
            for task in cfg.task.tasks() {
                jobs.push((backend.clone(), dimension, task));
            }
        }
    }
    jobs
}

pub fn model_file_stem(dimension: Dimension, task: ProbeTask) -> String {
    format!("{dimension}_{task}")
}

/// Writes `<dir>/<backend>/<dimension>_<task>.json` and the matching
/// `.selection.csv` trace.
pub fn save_probe(dir: &Path, probe: &TrainedProbe) -> Result<()> {
    let sub = dir.join(&probe.model.backend_name);
    std::fs::create_dir_all(&sub)?;
    let stem = model_file_stem(probe.model.dimension, probe.model.task);
    probe.model.save(sub.join(format!("{stem}.json")))?;
    let f = std::fs::File::create(sub.join(format!("{stem}.selection.csv")))?;
    probe.selection.write_csv(std::io::BufWriter::new(f))?;
    Ok(())
}

/// Loads every `*.json` model below `dir`, sorted by path.
pub fn load_models(dir: &Path) -> Result<Vec<ProbeModel>> {
    require_path(dir)?;
    let mut paths = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "json") {
                paths.push(p);
            }
        }
    }
    paths.sort();
    paths.iter().map(|p| Ok(ProbeModel::load(p)?)).collect()
}

/// Trains every (backend, dimension, task) probe of the config on the
/// training categories and persists them to the models directory.
pub fn train_all(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<TrainedProbe>> {
    let jobs = probe_jobs(cfg);
    let cats = cfg.train_categories.as_deref();
    let probes: Vec<TrainedProbe> = run_pool(cfg.jobs, || {
        jobs.par_iter()
            .map(|(backend, dimension, task)| {
                let table = data.table(backend)?;
                train_probe(&data.manifest, table, backend, *dimension, *task, cats, cfg.seed)
                    .map_err(|e| e.in_probe(backend, *dimension, *task))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let dir = cfg.models_dir();
    for p in &probes {
        save_probe(&dir, p)?;
    }
    Ok(probes)
}

/// Evaluates models on the test split restricted to the eval categories.
pub fn evaluate_all(cfg: &ExperimentConfig, data: &Dataset, models: &[ProbeModel]) -> Result<Vec<ReportRow>> {
    let cats = cfg.eval_categories.as_deref();
    let boot = cfg.bootstrap();
    run_pool(cfg.jobs, || {
        models
            .par_iter()
            .map(|m| {
                let table = data.table(&m.backend_name)?;
                evaluate_probe(m, &data.manifest, table, cats, cfg.bootstrap_unit, &boot)
                    .map_err(|e| e.in_probe(&m.backend_name, m.dimension, m.task))
            })
            .collect::<Result<Vec<_>>>()
    })?
}

/// Orders rows as backend, dimension (canonical order), metric.
fn sort_rows(rows: &mut [ReportRow]) {
    let dim_pos = |s: &str| s.parse::<Dimension>().map_or(usize::MAX, Dimension::index);
    let metric_pos = |m: MetricKind| m as usize;
    rows.sort_by(|a, b| {
        (a.backend.as_str(), dim_pos(&a.dimension), metric_pos(a.report.metric))
            .cmp(&(b.backend.as_str(), dim_pos(&b.dimension), metric_pos(b.report.metric)))
    });
}

#[derive(Debug, Clone)]
pub struct Table1 {
    pub rows: Vec<ReportRow>,
    pub probes: Vec<TrainedProbe>,
}

impl Table1 {
    pub fn get(&self, backend: &str, dimension: Dimension, metric: MetricKind) -> Option<&MetricReport> {
        self.rows
            .iter()
            .find(|r| r.backend == backend && r.dimension == dimension.as_str() && r.report.metric == metric)
            .map(|r| &r.report)
    }
}

/// Trains and evaluates on already loaded data.
pub fn table1_on(cfg: &ExperimentConfig, data: &Dataset) -> Result<Table1> {
    let probes = train_all(cfg, data)?;
    let models: Vec<ProbeModel> = probes.iter().map(|p| p.model.clone()).collect();
    let mut rows = evaluate_all(cfg, data, &models)?;
    sort_rows(&mut rows);
    Ok(Table1 { rows, probes })
}

/// In-domain results: per backend and dimension, test Spearman of the
/// regression probe and test AUC of the classification probe. Writes the
/// models, `table1.csv` and `run_meta.json`.
pub fn run_table1(cfg: &ExperimentConfig) -> Result<Table1> {
    cfg.validate()?;
    let data = Dataset::load(&cfg.manifest_path, &cfg.embedding_paths)?;
    let t = table1_on(cfg, &data)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    write_report_file(&cfg.output_dir.join("table1.csv"), &t.rows)?;
    write_run_meta(cfg, "evaluate")?;
    Ok(t)
}

pub fn write_report_file(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    metrics::write_report_csv(rows, std::io::BufWriter::new(f))?;
    Ok(())
}

/// Training group of the generalization grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrainGroup {
    All,
    Only(Category),
}

impl TrainGroup {
    pub const ALL: [TrainGroup; 4] = [
        TrainGroup::All,
        TrainGroup::Only(Category::DigitalCommand),
        TrainGroup::Only(Category::NovelSentence),
        TrainGroup::Only(Category::SpontaneousSpeech),
    ];

    pub fn categories(self) -> Option<Vec<Category>> {
        match self {
            TrainGroup::All => None,
            TrainGroup::Only(c) => Some(vec![c]),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            TrainGroup::All => "all",
            TrainGroup::Only(c) => c.as_str(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table2Cell {
    pub backend: String,
    pub train: TrainGroup,
    pub eval: Category,
    pub summary: MeanStd,
    /// Test Spearman per dimension, in config order.
    pub per_dimension: Vec<(Dimension, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table2 {
    pub cells: Vec<Table2Cell>,
}

impl Table2 {
    pub fn get(&self, backend: &str, train: TrainGroup, eval: Category) -> Option<&Table2Cell> {
        self.cells
            .iter()
            .find(|c| c.backend == backend && c.train == train && c.eval == eval)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["backend", "train_category", "eval_category", "mean_spearman", "std_spearman", "n_dimensions"])?;
        for c in &self.cells {
            w.write_record([
                c.backend.clone(),
                c.train.label().to_string(),
                c.eval.to_string(),
                c.summary.mean.to_string(),
                c.summary.std.to_string(),
                c.per_dimension.len().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Test-split Spearman point estimate of a regression probe.
pub fn test_spearman(model: &ProbeModel, manifest: &Manifest, table: &EmbeddingTable, eval: Option<&[Category]>) -> Result<f64> {
    let test = embedstore::join(manifest, table, model.dimension, &split_filter(Split::Test, eval))?;
    let pred = model.decision_function(test.x.view())?;
    Ok(metrics::spearman_or_zero(&pred, &test.y)?)
}

fn check_categories(m: &Manifest) -> Result<()> {
    for split in Split::ALL {
        let present: BTreeSet<Category> = m
            .records
            .iter()
            .filter(|r| r.split == Some(split))
            .filter_map(|r| r.category)
            .collect();
        if let Some(&category) = Category::ALL.iter().find(|c| !present.contains(c)) {
            return Err(HarnessError::EmptyCategory { category, split });
        }
    }
    Ok(())
}

/// Generalization grid on loaded data: regression probes trained on each
/// of {all, digital_command, novel_sentence, spontaneous}, evaluated on the
/// test split of each category, summarized as mean/std over dimensions.
pub fn table2_on(cfg: &ExperimentConfig, data: &Dataset) -> Result<Table2> {
    check_categories(&data.manifest)?;
    let mut jobs = Vec::new();
    for backend in cfg.embedding_paths.keys() {
        for group in TrainGroup::ALL {
            for &dimension in &cfg.dimensions {
                jobs.push((backend.clone(), group, dimension));
            }
        }
    }
    // (backend, group, dimension) -> spearman per eval category
    let results: Vec<[f64; 3]> = run_pool(cfg.jobs, || {
        jobs.par_iter()
            .map(|(backend, group, dimension)| {
                let table = data.table(backend)?;
                let cats = group.categories();
                let probe = train_probe(
                    &data.manifest,
                    table,
                    backend,
                    *dimension,
                    ProbeTask::Regression,
                    cats.as_deref(),
                    cfg.seed,
                )
                .map_err(|e| e.in_probe(backend, *dimension, ProbeTask::Regression))?;
                let mut out = [0.0; 3];
                for eval in Category::ALL {
                    out[eval.index()] = test_spearman(&probe.model, &data.manifest, table, Some(&[eval]))?;
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let mut cells = Vec::new();
    let n_dims = cfg.dimensions.len();
    for (chunk, job) in results.chunks(n_dims).zip(jobs.chunks(n_dims)) {
        let (backend, group, _) = &job[0];
        for eval in Category::ALL {
            let per_dimension: Vec<(Dimension, f64)> = job
                .iter()
                .zip(chunk)
                .map(|((_, _, d), vals)| (*d, vals[eval.index()]))
                .collect();
            let values: Vec<f64> = per_dimension.iter().map(|(_, v)| *v).collect();
            cells.push(Table2Cell {
                backend: backend.clone(),
                train: *group,
                eval,
                summary: metrics::aggregate_mean_std(&values)?,
                per_dimension,
            });
        }
    }
    let table = Table2 { cells };
    for backend in cfg.embedding_paths.keys() {
        for eval in Category::ALL {
            let all = table.get(backend, TrainGroup::All, eval).expect("cell exists").summary.mean;
            for c in Category::ALL {
                let single = table.get(backend, TrainGroup::Only(c), eval).expect("cell exists").summary.mean;
                if all + 0.05 < single {
                    warn!("{backend}: training on all categories trails {c}-only training on {eval} ({all:.3} < {single:.3})");
                }
            }
        }
    }
    Ok(table)
}

pub fn run_table2(cfg: &ExperimentConfig) -> Result<Table2> {
    cfg.validate()?;
    let data = Dataset::load(&cfg.manifest_path, &cfg.embedding_paths)?;
    let t = table2_on(cfg, &data)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let f = std::fs::File::create(cfg.output_dir.join("table2.csv"))?;
    t.write_csv(std::io::BufWriter::new(f))?;
    write_run_meta(cfg, "generalize")?;
    Ok(t)
}

/// Options for scoring an external dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroShotOptions {
    pub use_classifier: bool,
    pub severity_cut: Option<u32>,
    pub unit: BootstrapUnit,
    pub boot: BootstrapConfig,
}

impl Default for ZeroShotOptions {
    fn default() -> Self {
        Self {
            use_classifier: false,
            severity_cut: None,
            unit: BootstrapUnit::Row,
            boot: BootstrapConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZeroShotReport {
    pub dataset_name: String,
    pub backend: String,
    /// One entry per dimension, canonical order.
    pub per_dimension_auc: Vec<(Dimension, MetricReport)>,
    pub sum_auc: MetricReport,
}

impl ZeroShotReport {
    pub fn rows(&self) -> Vec<ReportRow> {
        self.per_dimension_auc
            .iter()
            .map(|(d, r)| ReportRow {
                backend: self.backend.clone(),
                dimension: d.to_string(),
                report: *r,
            })
            .chain(std::iter::once(ReportRow {
                backend: self.backend.clone(),
                dimension: SUM_LABEL.to_string(),
                report: self.sum_auc,
            }))
            .collect()
    }
}

/// Picks one model per dimension (canonical order) for `backend` and task.
pub fn models_for(models: &[ProbeModel], backend: &str, task: ProbeTask) -> Result<Vec<ProbeModel>> {
    Dimension::ALL
        .iter()
        .map(|&d| {
            models
                .iter()
                .find(|m| m.backend_name == backend && m.dimension == d && m.task == task)
                .cloned()
                .ok_or(HarnessError::MissingModel {
                    backend: backend.to_string(),
                    dimension: d,
                    task,
                })
        })
        .collect()
}

/// Backends present in a model set, sorted.
pub fn model_backends(models: &[ProbeModel]) -> Vec<String> {
    models
        .iter()
        .map(|m| m.backend_name.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Applies a model: the regression output, or the class probability.
fn zero_shot_score(model: &ProbeModel, x: ndarray::ArrayView2<f64>) -> Result<Vec<f64>> {
    Ok(model.predict(x)?)
}

/// Zero-shot AUC of every dimension's probe against a binary severity
/// label, plus the AUC of the unweighted sum of all seven predictions.
pub fn run_zeroshot(
    models: &[ProbeModel],
    manifest: &Manifest,
    table: &EmbeddingTable,
    backend: &str,
    dataset_name: &str,
    opts: &ZeroShotOptions,
) -> Result<ZeroShotReport> {
    let task = if opts.use_classifier {
        ProbeTask::Classification
    } else {
        ProbeTask::Regression
    };
    let chosen = models_for(models, backend, task)?;
    let rows = embedstore::join_rows(manifest, table, &RecordFilter::all(), |r| r.severity.is_some());
    if rows.record_indices.is_empty() {
        return Err(HarnessError::NoSeverity);
    }
    let labels: Vec<f64> = rows
        .record_indices
        .iter()
        .map(|&i| {
            let s = manifest.records[i].severity.expect("filtered");
            match opts.severity_cut {
                Some(cut) => Ok(f64::from(u8::from(s >= cut))),
                None if s <= 1 => Ok(f64::from(s)),
                None => Err(HarnessError::NonBinarySeverity(s)),
            }
        })
        .collect::<Result<_>>()?;
    let speakers: Vec<String> = rows
        .record_indices
        .iter()
        .map(|&i| manifest.records[i].speaker_id.clone())
        .collect();

    let mut per_dimension_auc = Vec::with_capacity(7);
    let mut composite = vec![0.0; labels.len()];
    for m in &chosen {
        let pred = zero_shot_score(m, rows.x.view())?;
        // canonical dimension order keeps the sum independent of input order
        for (c, p) in composite.iter_mut().zip(&pred) {
            *c += p;
        }
        let report = bootstrap_rows(MetricKind::Auc, &pred, &labels, &speakers, opts.unit, &opts.boot)?;
        per_dimension_auc.push((m.dimension, report));
    }
    let sum_auc = bootstrap_rows(MetricKind::Auc, &composite, &labels, &speakers, opts.unit, &opts.boot)?;
    Ok(ZeroShotReport {
        dataset_name: dataset_name.to_string(),
        backend: backend.to_string(),
        per_dimension_auc,
        sum_auc,
    })
}

/// Distribution summary of predictions within one severity level.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumSummary {
    pub backend: String,
    pub dimension: Dimension,
    pub severity: u32,
    pub n: usize,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Per (dimension, severity level) summaries of zero-shot predictions,
/// ordered by dimension then severity. Levels come from the manifest;
/// a level with no embedded records is omitted with a warning.
pub fn severity_stratified_predictions(
    models: &[ProbeModel],
    manifest: &Manifest,
    table: &EmbeddingTable,
    backend: &str,
    use_classifier: bool,
) -> Result<Vec<StratumSummary>> {
    let task = if use_classifier {
        ProbeTask::Classification
    } else {
        ProbeTask::Regression
    };
    let chosen = models_for(models, backend, task)?;
    let levels: BTreeSet<u32> = manifest.records.iter().filter_map(|r| r.severity).collect();
    let rows = embedstore::join_rows(manifest, table, &RecordFilter::all(), |r| r.severity.is_some());
    let sev: Vec<u32> = rows
        .record_indices
        .iter()
        .map(|&i| manifest.records[i].severity.expect("filtered"))
        .collect();
    let mut out = Vec::new();
    for m in &chosen {
        let pred = zero_shot_score(m, rows.x.view())?;
        for &level in &levels {
            let mut vals: Vec<f64> = pred.iter().zip(&sev).filter(|(_, &s)| s == level).map(|(p, _)| *p).collect();
            if vals.is_empty() {
                warn!("severity level {level} has no embedded records; stratum omitted");
                continue;
            }
            vals.sort_by(f64::total_cmp);
            out.push(StratumSummary {
                backend: backend.to_string(),
                dimension: m.dimension,
                severity: level,
                n: vals.len(),
                mean: shifted_mean(vals.iter()).expect("non-empty stratum"),
                q1: metrics::quantile_sorted(&vals, 0.25),
                median: metrics::quantile_sorted(&vals, 0.5),
                q3: metrics::quantile_sorted(&vals, 0.75),
            });
        }
    }
    Ok(out)
}

pub fn write_strata_csv<W: Write>(strata: &[StratumSummary], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["backend", "dimension", "severity", "n", "mean", "q1", "median", "q3"])?;
    for s in strata {
        w.write_record([
            s.backend.clone(),
            s.dimension.to_string(),
            s.severity.to_string(),
            s.n.to_string(),
            s.mean.to_string(),
            s.q1.to_string(),
            s.median.to_string(),
            s.q3.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffectCell {
    pub backend: String,
    pub emotion: Emotion,
    pub dimension: Dimension,
    /// `None` when no record carries this emotion.
    pub mean: Option<f64>,
    pub n: usize,
}

/// Mean regression prediction per (emotion, dimension), emotion-major in
/// canonical order; always 49 cells.
pub fn affect_profile(
    models: &[ProbeModel],
    manifest: &Manifest,
    table: &EmbeddingTable,
    backend: &str,
) -> Result<Vec<AffectCell>> {
    let chosen = models_for(models, backend, ProbeTask::Regression)?;
    let rows = embedstore::join_rows(manifest, table, &RecordFilter::all(), |r| r.emotion.is_some());
    let emotions: Vec<Emotion> = rows
        .record_indices
        .iter()
        .map(|&i| manifest.records[i].emotion.expect("filtered"))
        .collect();
    let preds: Vec<Vec<f64>> = chosen
        .iter()
        .map(|m| Ok(m.predict(rows.x.view())?))
        .collect::<Result<_>>()?;
    let mut cells = Vec::with_capacity(49);
    for e in Emotion::ALL {
        let n = emotions.iter().filter(|&&x| x == e).count();
        if n == 0 {
            warn!("no records with emotion `{e}`");
        }
        for (m, pred) in chosen.iter().zip(&preds) {
            let mean = shifted_mean(pred.iter().zip(&emotions).filter(|(_, &x)| x == e).map(|(p, _)| p));
            cells.push(AffectCell {
                backend: backend.to_string(),
                emotion: e,
                dimension: m.dimension,
                mean,
                n,
            });
        }
    }
    Ok(cells)
}

pub fn write_affect_csv<W: Write>(cells: &[AffectCell], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["backend", "emotion", "dimension", "mean_score", "n"])?;
    for c in cells {
        w.write_record([
            c.backend.clone(),
            c.emotion.to_string(),
            c.dimension.to_string(),
            c.mean.map(|v| v.to_string()).unwrap_or_default(),
            c.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean computed around the first value, exact when all values are equal.
fn shifted_mean<'a>(values: impl Iterator<Item = &'a f64>) -> Option<f64> {
    let mut it = values;
    let first = *it.next()?;
    let (mut acc, mut n) = (0.0, 1usize);
    for v in it {
        acc += v - first;
        n += 1;
    }
    Some(first + acc / n as f64)
}

/// Collapses a multi-class output to a scalar: `Σ pₖ · valueₖ`.
pub fn label_weighted_score(class_probs: &[f64], class_values: &[f64]) -> Result<f64> {
    if class_probs.len() != class_values.len() {
        return Err(HarnessError::LengthMismatch(class_probs.len(), class_values.len()));
    }
    if let Some(&p) = class_probs.iter().find(|&&p| p < 0.0) {
        return Err(HarnessError::NegativeProbability(p));
    }
    let total: f64 = class_probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(HarnessError::NotNormalized(total));
    }
    Ok(class_probs.iter().zip(class_values).map(|(p, v)| p * v).sum())
}

/// Runs zero-shot scoring and severity strata for the config's external
/// dataset, writing `zeroshot_<name>.csv` and `severity_strata_<name>.csv`.
pub fn run_zeroshot_from_config(cfg: &ExperimentConfig) -> Result<Vec<ZeroShotReport>> {
    let zs = cfg
        .zeroshot
        .as_ref()
        .ok_or_else(|| HarnessError::ConfigInvalid("missing `zeroshot` section".into()))?;
    let models = load_models(&cfg.models_dir())?;
    let data = Dataset::load(&zs.manifest_path, &zs.embedding_paths)?;
    let opts = ZeroShotOptions {
        use_classifier: zs.use_classifier,
        severity_cut: zs.severity_cut,
        unit: cfg.bootstrap_unit,
        boot: cfg.bootstrap(),
    };
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    let mut strata = Vec::new();
    for (backend, table) in &data.tables {
        let r = run_zeroshot(&models, &data.manifest, table, backend, &zs.dataset_name, &opts)?;
        rows.extend(r.rows());
        reports.push(r);
        strata.extend(severity_stratified_predictions(&models, &data.manifest, table, backend, zs.use_classifier)?);
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    write_report_file(&cfg.output_dir.join(format!("zeroshot_{}.csv", zs.dataset_name)), &rows)?;
    let f = std::fs::File::create(cfg.output_dir.join(format!("severity_strata_{}.csv", zs.dataset_name)))?;
    write_strata_csv(&strata, std::io::BufWriter::new(f))?;
    write_run_meta(cfg, "zeroshot")?;
    Ok(reports)
}

pub fn run_affect_from_config(cfg: &ExperimentConfig) -> Result<Vec<AffectCell>> {
    let af = cfg
        .affect
        .as_ref()
        .ok_or_else(|| HarnessError::ConfigInvalid("missing `affect` section".into()))?;
    let models = load_models(&cfg.models_dir())?;
    let data = Dataset::load(&af.manifest_path, &af.embedding_paths)?;
    let mut cells = Vec::new();
    for (backend, table) in &data.tables {
        cells.extend(affect_profile(&models, &data.manifest, table, backend)?);
    }
    std::fs::create_dir_all(&cfg.output_dir)?;
    let f = std::fs::File::create(cfg.output_dir.join("affect_profile.csv"))?;
    write_affect_csv(&cells, std::io::BufWriter::new(f))?;
    write_run_meta(cfg, "affect")?;
    Ok(cells)
}

/// Annotation statistics: correlation matrix, per-category histograms,
/// dimension eligibility and split integrity.
pub fn write_stats(m: &Manifest, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;

    let corr = corpus::annotation_correlations(m);
    let mut w = csv::Writer::from_path(out_dir.join("annotation_correlations.csv"))?;
    w.write_record(["dimension_a", "dimension_b", "pearson_r", "n_overlap"])?;
    for a in Dimension::ALL {
        for b in Dimension::ALL {
            w.write_record([
                a.to_string(),
                b.to_string(),
                corr.get(a, b).map(|v| v.to_string()).unwrap_or_default(),
                corr.overlap[a.index()][b.index()].to_string(),
            ])?;
        }
    }
    w.flush()?;

    let hist = corpus::score_histograms(m, true);
    let mut w = csv::Writer::from_path(out_dir.join("score_histograms.csv"))?;
    w.write_record(["dimension", "category", "score", "count"])?;
    for d in Dimension::ALL {
        for (g, group) in hist.groups.iter().enumerate() {
            let label = group.map_or("uncategorized", Category::as_str);
            for (s, count) in hist.counts[d.index()][g].iter().enumerate() {
                w.write_record([d.to_string(), label.to_string(), (s + 1).to_string(), count.to_string()])?;
            }
        }
    }
    w.flush()?;

    let elig = corpus::dimension_eligibility(m);
    let mut w = csv::Writer::from_path(out_dir.join("dimension_eligibility.csv"))?;
    w.write_record(["dimension", "annotated", "rated_at_least_2", "eligible"])?;
    for d in Dimension::ALL {
        let annotated = m.records.iter().filter(|r| r.score(d).is_some()).count();
        let atypical = m.records.iter().filter(|r| r.score(d).is_some_and(|s| s >= 2)).count();
        w.write_record([d.to_string(), annotated.to_string(), atypical.to_string(), elig[&d].to_string()])?;
    }
    w.flush()?;

    let summary = serde_json::json!({
        "source_name": m.source_name,
        "n_records": m.len(),
        "split_sizes": m.split_sizes(),
        "speaker_disjoint": corpus::check_speaker_disjoint(m),
        "correlation_scope": "all records, pairwise complete",
    });
    std::fs::write(out_dir.join("stats_summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

/// Writes `run_meta.json`: command, config hash, seed and crate version.
/// Contains nothing time-dependent so reruns are byte-identical.
pub fn write_run_meta(cfg: &ExperimentConfig, command: &str) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    let meta = serde_json::json!({
        "tool": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "n_boot": cfg.n_boot,
        "bootstrap_unit": cfg.bootstrap_unit,
        "ci_method": "percentile",
        "aggregate_std": "population",
    });
    std::fs::write(cfg.output_dir.join("run_meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}
