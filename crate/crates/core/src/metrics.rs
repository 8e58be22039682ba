//! Evaluation statistics and percentile-bootstrap confidence intervals.
//!
//! Conventions: Spearman uses average ranks for ties, AUC gives half credit
//! to tied positive/negative pairs, and all spreads are population (divide by
//! `n`) statistics.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("constant input, correlation undefined")]
    ConstantInput,
    #[error("constant truth, R² undefined")]
    ConstantTruth,
    #[error("labels contain a single class")]
    SingleClass,
    #[error("empty input")]
    Empty,
    #[error("bootstrap resampling degenerate: no valid resample in {attempts} attempts")]
    DegenerateResampling { attempts: usize },
    #[error("invalid bootstrap configuration: {0}")]
    InvalidConfig(String),
    #[error("csv error: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Spearman,
    Pearson,
    Auc,
    R2,
    Mae,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Spearman => "spearman",
            MetricKind::Pearson => "pearson",
            MetricKind::Auc => "auc",
            MetricKind::R2 => "r2",
            MetricKind::Mae => "mae",
        }
    }

    /// Closed range of values the metric can take.
    pub fn codomain(self) -> (f64, f64) {
        match self {
            MetricKind::Spearman | MetricKind::Pearson => (-1.0, 1.0),
            MetricKind::Auc => (0.0, 1.0),
            MetricKind::R2 => (f64::NEG_INFINITY, 1.0),
            MetricKind::Mae => (0.0, f64::INFINITY),
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spearman" => Ok(MetricKind::Spearman),
            "pearson" => Ok(MetricKind::Pearson),
            "auc" => Ok(MetricKind::Auc),
            "r2" => Ok(MetricKind::R2),
            "mae" => Ok(MetricKind::Mae),
            _ => Err(format!("unknown metric `{s}`")),
        }
    }
}

fn check_pair(a: &[f64], b: &[f64], min: usize) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < min {
        return Err(MetricError::TooFewSamples {
            needed: min,
            got: a.len(),
        });
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// 1-based ranks with ties replaced by the mean of the ranks they span.
/// Values are ordered with `f64::total_cmp`.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && xs[order[end]].total_cmp(&xs[order[start]]) == Ordering::Equal {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let r = (start + 1 + end) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = r;
        }
        start = end;
    }
    ranks
}

/// Product-moment correlation. Errors when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, MetricError> {
    check_pair(a, b, 2)?;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(MetricError::ConstantInput);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Rank correlation; Pearson correlation of the average-rank transforms.
pub fn spearman(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, truth, 2)?;
    pearson(&average_ranks(pred), &average_ranks(truth))
}

/// Area under the ROC curve via the Mann–Whitney statistic, ties counted as
/// one half. Runs in `O(n log n)`.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let ranks = average_ranks(scores);
    // Rank sums are multiples of 1/2, so this is exact well past any
    // realistic n.
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, truth, 2)?;
    let m = mean(truth);
    let ss_tot: f64 = truth.iter().map(|t| (t - m).powi(2)).sum();
    if ss_tot <= 0.0 {
        return Err(MetricError::ConstantTruth);
    }
    let ss_res: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, truth, 1)?;
    Ok(truth.iter().zip(pred).map(|(t, p)| (t - p).abs()).sum::<f64>() / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct R2Mae {
    /// `None` when the truth is constant.
    pub r2: Option<f64>,
    pub mae: f64,
}

pub fn r2_mae(pred: &[f64], truth: &[f64]) -> Result<R2Mae, MetricError> {
    check_pair(pred, truth, 2)?;
    let r2 = match r2(pred, truth) {
        Ok(v) => Some(v),
        Err(MetricError::ConstantTruth) => None,
        Err(e) => return Err(e),
    };
    Ok(R2Mae {
        r2,
        mae: mae(pred, truth)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

pub fn aggregate_mean_std(values: &[f64]) -> Result<MeanStd, MetricError> {
    if values.is_empty() {
        return Err(MetricError::Empty);
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64;
    Ok(MeanStd {
        mean: m,
        std: var.sqrt(),
    })
}

/// Quantile of `sorted` (ascending) by linear interpolation between order
/// statistics at position `q * (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    assert!((0.0..=1.0).contains(&q), "quantile level {q} outside [0, 1]");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Resampling unit of the bootstrap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BootstrapUnit {
    /// Rows are drawn independently with replacement.
    #[default]
    Row,
    /// Whole speakers (clusters of rows) are drawn with replacement.
    Speaker,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_boot: usize,
    pub seed: u64,
    pub level: f64,
    /// Draws per replicate before giving up on degenerate resamples.
    pub max_redraws: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_boot: 1000,
            seed: 0,
            level: 0.95,
            max_redraws: 100,
        }
    }
}

impl BootstrapConfig {
    pub fn new(n_boot: usize, seed: u64) -> Self {
        Self {
            n_boot,
            seed,
            ..Self::default()
        }
    }
}

/// Point estimate with a percentile bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: MetricKind,
    pub point: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub n_boot: usize,
    pub seed: u64,
}

/// Random stream for one bootstrap replicate. Each replicate gets its own
/// ChaCha stream so results do not depend on scheduling.
fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

/// Percentile bootstrap over `n` rows.
///
/// `statistic` receives the row indices of a resample (with repeats) and
/// returns the metric value. A resample on which the statistic errors (e.g.
/// a single class) is redrawn, up to `cfg.max_redraws` draws per replicate.
///
/// When `clusters` is given, it holds a cluster id per row and whole
/// clusters are resampled instead of rows.
pub fn bootstrap_ci<F>(
    kind: MetricKind,
    n: usize,
    statistic: F,
    clusters: Option<&[usize]>,
    cfg: &BootstrapConfig,
) -> Result<MetricReport, MetricError>
where
    F: Fn(&[usize]) -> Result<f64, MetricError> + Sync,
{
    if !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(MetricError::InvalidConfig(format!("level {}", cfg.level)));
    }
    if cfg.n_boot == 0 {
        return Err(MetricError::InvalidConfig("n_boot must be positive".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = statistic(&all)?;

    let groups: Option<Vec<Vec<usize>>> = clusters
        .map(|ids| {
            if ids.len() != n {
                return Err(MetricError::LengthMismatch(ids.len(), n));
            }
            let k = ids.iter().copied().max().map_or(0, |m| m + 1);
            let mut g = vec![Vec::new(); k];
            for (row, &c) in ids.iter().enumerate() {
                g[c].push(row);
            }
            g.retain(|v| !v.is_empty());
            Ok(g)
        })
        .transpose()?;

    let draw = |rng: &mut ChaCha8Rng, buf: &mut Vec<usize>| {
        buf.clear();
        match &groups {
            None => buf.extend((0..n).map(|_| rng.random_range(0..n))),
            Some(g) => {
                for _ in 0..g.len() {
                    buf.extend_from_slice(&g[rng.random_range(0..g.len())]);
                }
            }
        }
    };

    let mut values: Vec<f64> = (0..cfg.n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = replicate_rng(cfg.seed, b);
            let mut idx = Vec::with_capacity(n);
            for _ in 0..cfg.max_redraws {
                draw(&mut rng, &mut idx);
                if let Ok(v) = statistic(&idx) {
                    return Ok(v);
                }
            }
            Err(MetricError::DegenerateResampling {
                attempts: cfg.max_redraws,
            })
        })
        .collect::<Result<_, _>>()?;
    values.sort_by(f64::total_cmp);

    let alpha = (1.0 - cfg.level) / 2.0;
    let (lo, hi) = kind.codomain();
    let ci_low = quantile_sorted(&values, alpha).clamp(lo, hi);
    let ci_high = quantile_sorted(&values, 1.0 - alpha).clamp(lo, hi);
    Ok(MetricReport {
        metric: kind,
        point,
        ci_low,
        ci_high,
        n,
        n_boot: cfg.n_boot,
        seed: cfg.seed,
    })
}

fn gather(xs: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| xs[i]).collect()
}

/// Spearman that treats a constant prediction as carrying no rank
/// information (ρ = 0). A constant truth remains an error.
pub fn spearman_or_zero(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check_pair(pred, truth, 2)?;
    let constant = |xs: &[f64]| xs.iter().all(|&x| x == xs[0]);
    if constant(truth) {
        return Err(MetricError::ConstantInput);
    }
    if constant(pred) {
        return Ok(0.0);
    }
    spearman(pred, truth)
}

/// Bootstrap of a standard metric on paired `(pred, truth)` rows. For AUC,
/// `truth` holds labels as 0/1.
pub fn bootstrap_metric(
    kind: MetricKind,
    pred: &[f64],
    truth: &[f64],
    clusters: Option<&[usize]>,
    cfg: &BootstrapConfig,
) -> Result<MetricReport, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    let labels: Vec<bool> = truth.iter().map(|&t| t > 0.5).collect();
    let stat = |idx: &[usize]| -> Result<f64, MetricError> {
        let p = gather(pred, idx);
        match kind {
            MetricKind::Auc => {
                let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
                auc(&p, &l)
            }
            MetricKind::Spearman => spearman_or_zero(&p, &gather(truth, idx)),
            MetricKind::Pearson => pearson(&p, &gather(truth, idx)),
            MetricKind::R2 => r2(&p, &gather(truth, idx)),
            MetricKind::Mae => mae(&p, &gather(truth, idx)),
        }
    };
    bootstrap_ci(kind, pred.len(), stat, clusters, cfg)
}

/// One line of a metric report CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub backend: String,
    /// Dimension name, or a composite label such as `sum_all_dims`.
    pub dimension: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

pub const REPORT_HEADER: [&str; 9] = [
    "backend",
    "dimension",
    "metric",
    "point",
    "ci_low",
    "ci_high",
    "n",
    "n_boot",
    "seed",
];

pub fn write_report_csv<W: Write>(rows: &[ReportRow], writer: W) -> Result<(), MetricError> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| MetricError::Csv(e.to_string());
    w.write_record(REPORT_HEADER).map_err(err)?;
    for r in rows {
        w.write_record([
            r.backend.clone(),
            r.dimension.clone(),
            r.report.metric.to_string(),
            r.report.point.to_string(),
            r.report.ci_low.to_string(),
            r.report.ci_high.to_string(),
            r.report.n.to_string(),
            r.report.n_boot.to_string(),
            r.report.seed.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| MetricError::Csv(e.to_string()))?;
    Ok(())
}
