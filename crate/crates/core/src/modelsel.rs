//! Validation-split selection of the regularization strength, and
//! conversion of 1..=7 ratings to binary labels.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dimension, Manifest};
use crate::embedstore::DesignMatrix;
use crate::linmod::{self, FitError, LinearFit, ProbeModel, ProbeTask, SolverOptions, Standardizer, TrainMeta};
use crate::metrics::{self, MetricError};

/// Target share of positive labels after binarization.
pub const TARGET_POSITIVE_RATE: f64 = 0.20;

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("{0} split has a single class after binarization")]
    SingleClass(&'static str),
    #[error("empty regularization grid")]
    EmptyGrid,
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMetric {
    SpearmanVal,
    AucVal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen_lambda: f64,
    /// `(λ, validation metric)` in grid order.
    pub val_metric_by_lambda: Vec<(f64, f64)>,
    pub selection_metric: SelectionMetric,
}

impl SelectionResult {
    /// Writes the `lambda,val_metric` trace.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SelectError> {
        let mut w = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| SelectError::Io(e.into());
        w.write_record(["lambda", "val_metric"]).map_err(io)?;
        for (l, v) in &self.val_metric_by_lambda {
            w.write_record([l.to_string(), v.to_string()]).map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Binarization threshold with its achieved positive rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Threshold {
    pub t: u8,
    pub positive_rate: f64,
    /// All labels end up in one class.
    pub degenerate: bool,
}

/// Picks `t ∈ 2..=7` whose rate of scores `>= t` is closest to 20%,
/// preferring the smaller `t` on ties. An empty input yields `t = 2`,
/// flagged degenerate.
pub fn binarize_threshold(scores: &[u8]) -> Threshold {
    let n = scores.len();
    let count_at_least = |t: u8| scores.iter().filter(|&&s| s >= t).count();
    // |k/n − 1/5| compared exactly as |5k − n|
    let distance = |k: usize| (5 * k).abs_diff(n);
    let mut best = (2u8, count_at_least(2));
    for t in 3..=7u8 {
        let k = count_at_least(t);
        if distance(k) < distance(best.1) {
            best = (t, k);
        }
    }
    let (t, k) = best;
    Threshold {
        t,
        positive_rate: if n == 0 { 0.0 } else { k as f64 / n as f64 },
        degenerate: k == 0 || k == n,
    }
}

pub fn binarize(score: u8, t: u8) -> bool {
    score >= t
}

/// Labels for every record annotated on `dimension`, in manifest order.
pub fn apply_binarization(m: &Manifest, dimension: Dimension, t: u8) -> Vec<(String, bool)> {
    m.records
        .iter()
        .filter_map(|r| Some((r.utterance_id.clone(), binarize(r.score(dimension)?, t))))
        .collect()
}

/// Identifies the probe being trained; stored in the model.
#[derive(Debug, Clone)]
pub struct ProbeContext {
    pub backend_name: String,
    pub dimension: Dimension,
    pub seed: u64,
}

/// Index of the best metric; the first (largest λ) wins ties.
fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Fits the whole warm-started path on `train`, scores every λ on `val`
/// (Spearman for regression, AUC on the linear score for classification)
/// and returns the best model, trained on `train` only.
///
/// `grid` defaults to [`linmod::lambda_grid`] on the standardized training
/// features. For classification the threshold is chosen on the training
/// scores and reused for validation labels.
pub fn select_lambda(
    train: &DesignMatrix,
    val: &DesignMatrix,
    task: ProbeTask,
    grid: Option<&[f64]>,
    ctx: &ProbeContext,
) -> Result<(SelectionResult, ProbeModel), SelectError> {
    if val.n() == 0 {
        return Err(SelectError::EmptyValidation);
    }
    let standardizer = Standardizer::fit(train.x.view())?;
    let xs = standardizer.transform(train.x.view())?;
    let xv = standardizer.transform(val.x.view())?;

    let (targets, threshold) = match task {
        ProbeTask::Regression => (train.y.clone(), None),
        ProbeTask::Classification => {
            let th = binarize_threshold(&train.scores());
            if th.degenerate {
                return Err(SelectError::SingleClass("train"));
            }
            let labels = train
                .scores()
                .into_iter()
                .map(|s| f64::from(u8::from(binarize(s, th.t))))
                .collect();
            (labels, Some(th.t))
        }
    };
    let val_labels: Vec<bool> = match threshold {
        Some(t) => {
            let l: Vec<bool> = val.scores().into_iter().map(|s| binarize(s, t)).collect();
            if l.iter().all(|&v| v) || l.iter().all(|&v| !v) {
                return Err(SelectError::SingleClass("validation"));
            }
            l
        }
        None => Vec::new(),
    };

    let owned_grid;
    let grid = match grid {
        Some(g) => g,
        None => {
            owned_grid = linmod::lambda_grid(xs.view(), &targets, task);
            &owned_grid
        }
    };
    if grid.is_empty() {
        return Err(SelectError::EmptyGrid);
    }

    let path: Vec<LinearFit> = match task {
        ProbeTask::Regression => linmod::lasso_path(xs.view(), &targets, grid, &SolverOptions::lasso())?,
        ProbeTask::Classification => {
            linmod::logistic_path(xs.view(), &targets, grid, &SolverOptions::logistic())?
        }
    };

    let scores: Vec<f64> = path
        .iter()
        .map(|fit| {
            let pred = (xv.dot(&ndarray::ArrayView1::from(&fit.weights[..])) + fit.intercept).to_vec();
            match task {
                ProbeTask::Regression => metrics::spearman_or_zero(&pred, &val.y),
                ProbeTask::Classification => metrics::auc(&pred, &val_labels),
            }
        })
        .collect::<Result<_, _>>()?;

    let best = argmax_first(&scores);
    let fit = &path[best];
    let result = SelectionResult {
        chosen_lambda: fit.lambda,
        val_metric_by_lambda: grid.iter().copied().zip(scores.iter().copied()).collect(),
        selection_metric: match task {
            ProbeTask::Regression => SelectionMetric::SpearmanVal,
            ProbeTask::Classification => SelectionMetric::AucVal,
        },
    };
    let model = ProbeModel {
        task,
        backend_name: ctx.backend_name.clone(),
        dimension: ctx.dimension,
        lambda: fit.lambda,
        intercept: fit.intercept,
        weights: fit.weights.clone(),
        means: standardizer.means,
        stds: standardizer.stds,
        binarization_threshold: threshold,
        train_meta: TrainMeta {
            n_train: train.n(),
            seed: ctx.seed,
            solver_iterations: fit.iterations,
            converged: fit.converged,
        },
    };
    Ok((result, model))
}
