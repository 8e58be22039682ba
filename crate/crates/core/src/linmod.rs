//! Linear probe solvers.
//!
//! * [`lasso_fit`]: cyclic coordinate descent with soft-thresholding on
//!   `(1/2n)‖y − Xw − b‖² + λ‖w‖₁`, intercept unpenalized.
//! * [`logistic_fit`]: truncated-Newton (Newton–CG) with Armijo backtracking on
//!   `(1/n)Σ log(1 + exp(−ỹ(xᵀw + b))) + (λ/2)‖w‖²`, intercept unpenalized.
//!
//! Both expect standardized features; [`Standardizer`] is fitted on the
//! training rows and stored with the model.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, ShapeBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Dimension;

/// Floor applied to per-column standard deviations.
pub const STD_EPSILON: f64 = 1e-8;

/// Number of points on a regularization path.
pub const GRID_LEN: usize = 50;
/// Smallest λ on a path relative to the largest.
pub const GRID_RATIO: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FitError {
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("{0} targets for {1} rows")]
    LengthMismatch(usize, usize),
    #[error("labels contain a single class")]
    SingleClass,
    #[error("invalid regularization strength {0}")]
    InvalidLambda(f64),
    #[error("non-finite value in input")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeTask {
    Regression,
    Classification,
}

impl ProbeTask {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeTask::Regression => "regression",
            ProbeTask::Classification => "classification",
        }
    }
}

impl std::fmt::Display for ProbeTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-column centering and scaling fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    pub fn dim(&self) -> usize {
        self.means.len()
    }

    /// Population mean and standard deviation per column. Constant columns
    /// get their exact value as mean and `STD_EPSILON` as scale, so they
    /// transform to exact zeros.
    pub fn fit(x: ArrayView2<f64>) -> Result<Self, FitError> {
        let n = x.nrows();
        if n < 2 {
            return Err(FitError::TooFewRows { needed: 2, got: n });
        }
        let mut means = Vec::with_capacity(x.ncols());
        let mut stds = Vec::with_capacity(x.ncols());
        for col in x.axis_iter(Axis(1)) {
            if col.iter().any(|v| !v.is_finite()) {
                return Err(FitError::NonFinite);
            }
            let first = col[0];
            if col.iter().all(|&v| v == first) {
                means.push(first);
                stds.push(STD_EPSILON);
                continue;
            }
            let m = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            means.push(m);
            stds.push(var.sqrt().max(STD_EPSILON));
        }
        Ok(Self { means, stds })
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, FitError> {
        if x.ncols() != self.dim() {
            return Err(FitError::DimMismatch {
                expected: self.dim(),
                got: x.ncols(),
            });
        }
        let mut out = x.to_owned();
        for (mut col, (m, s)) in out.axis_iter_mut(Axis(1)).zip(self.means.iter().zip(&self.stds)) {
            col.mapv_inplace(|v| (v - m) / s);
        }
        Ok(out)
    }
}

/// Solver stopping rules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Lasso: stop when the largest coefficient change in a sweep is below
    /// this. Logistic: stop when the gradient norm is below this.
    pub tol: f64,
    /// Lasso sweeps or Newton iterations.
    pub max_iter: usize,
    /// Record the objective after every Lasso sweep.
    pub record_objective: bool,
}

impl SolverOptions {
    pub fn lasso() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 10_000,
            record_objective: false,
        }
    }

    pub fn logistic() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 200,
            record_objective: false,
        }
    }
}

/// Result of a single solve. Non-convergence is reported through
/// `converged` and the best iterate is returned.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each Lasso sweep, when requested.
    pub objective_trace: Vec<f64>,
}

fn check_xy(x: ArrayView2<f64>, y: &[f64]) -> Result<(), FitError> {
    if x.nrows() != y.len() {
        return Err(FitError::LengthMismatch(y.len(), x.nrows()));
    }
    if x.nrows() == 0 {
        return Err(FitError::TooFewRows { needed: 1, got: 0 });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(FitError::NonFinite);
    }
    Ok(())
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

fn column_major(x: ArrayView2<f64>) -> Array2<f64> {
    let mut xf = Array2::zeros(x.raw_dim().f());
    xf.assign(&x);
    xf
}

/// `(1/n) xⱼᵀ r` for every column.
fn scaled_correlations(xf: &Array2<f64>, r: &Array1<f64>) -> Vec<f64> {
    let n = r.len() as f64;
    xf.columns().into_iter().map(|c| c.dot(r) / n).collect()
}

/// `(1/2n)‖y − Xw − b‖² + λ‖w‖₁`.
pub fn lasso_objective(x: ArrayView2<f64>, y: &[f64], weights: &[f64], intercept: f64, lambda: f64) -> f64 {
    let w = ArrayView1::from(weights);
    let pred = x.dot(&w);
    let n = y.len() as f64;
    let rss: f64 = y.iter().zip(pred.iter()).map(|(t, p)| (t - p - intercept).powi(2)).sum();
    rss / (2.0 * n) + lambda * weights.iter().map(|v| v.abs()).sum::<f64>()
}

/// Smallest λ for which the Lasso solution is all zeros:
/// `max_j |xⱼᵀ(y − ȳ)| / n`.
pub fn lasso_lambda_max(x: ArrayView2<f64>, y: &[f64]) -> f64 {
    let xf = column_major(x);
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let r: Array1<f64> = y.iter().map(|v| v - ybar).collect();
    scaled_correlations(&xf, &r).into_iter().fold(0.0, |m, c| m.max(c.abs()))
}

/// Lasso by cyclic coordinate descent. `warm_start` seeds the weights.
pub fn lasso_fit(
    x: ArrayView2<f64>,
    y: &[f64],
    lambda: f64,
    warm_start: Option<&[f64]>,
    opts: &SolverOptions,
) -> Result<LinearFit, FitError> {
    check_xy(x, y)?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(FitError::InvalidLambda(lambda));
    }
    let (n, d) = x.dim();
    let nf = n as f64;
    let xf = column_major(x);
    let col_sq: Vec<f64> = xf.columns().into_iter().map(|c| c.dot(&c) / nf).collect();

    let mut w = match warm_start {
        Some(w0) if w0.len() == d => w0.to_vec(),
        Some(w0) => {
            return Err(FitError::DimMismatch {
                expected: d,
                got: w0.len(),
            })
        }
        None => vec![0.0; d],
    };
    let wv = ArrayView1::from(&w[..]);
    let xw = xf.dot(&wv);
    let mut b = y.iter().zip(xw.iter()).map(|(t, p)| t - p).sum::<f64>() / nf;
    let mut r: Array1<f64> = y.iter().zip(xw.iter()).map(|(t, p)| t - p - b).collect();

    let mut trace = Vec::new();
    if opts.record_objective {
        trace.push(lasso_objective(x, y, &w, b, lambda));
    }
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < opts.max_iter {
        sweeps += 1;
        let mut max_delta: f64 = 0.0;
        for (j, col) in xf.columns().into_iter().enumerate() {
            if col_sq[j] == 0.0 {
                if w[j] != 0.0 {
                    max_delta = max_delta.max(w[j].abs());
                    w[j] = 0.0;
                }
                continue;
            }
            let old = w[j];
            let rho = col.dot(&r) / nf + col_sq[j] * old;
            let new = soft_threshold(rho, lambda) / col_sq[j];
            let delta = new - old;
            if delta != 0.0 {
                r.scaled_add(-delta, &col);
                w[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        // exact minimization over the unpenalized intercept
        let shift = r.sum() / nf;
        if shift != 0.0 {
            r.mapv_inplace(|v| v - shift);
            b += shift;
        }
        max_delta = max_delta.max(shift.abs());
        if opts.record_objective {
            trace.push(lasso_objective(x, y, &w, b, lambda));
        }
        if max_delta < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("lasso did not converge in {} sweeps at lambda {lambda:e}", opts.max_iter);
    }
    Ok(LinearFit {
        weights: w,
        intercept: b,
        lambda,
        iterations: sweeps,
        converged,
        objective_trace: trace,
    })
}

/// Warm-started Lasso solutions along `grid`, in grid order.
pub fn lasso_path(
    x: ArrayView2<f64>,
    y: &[f64],
    grid: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<LinearFit>, FitError> {
    let mut out: Vec<LinearFit> = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let warm = out.last().map(|f| f.weights.as_slice());
        out.push(lasso_fit(x, y, lambda, warm, opts)?);
    }
    Ok(out)
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn margins(x: &Array2<f64>, w: &[f64], b: f64) -> Array1<f64> {
    x.dot(&ArrayView1::from(w)) + b
}

fn check_labels(y: &[f64]) -> Result<(), FitError> {
    let pos = y.iter().filter(|&&v| v > 0.5).count();
    if pos == 0 || pos == y.len() {
        return Err(FitError::SingleClass);
    }
    Ok(())
}

/// L2-penalized logistic loss; labels are 0/1.
pub fn logistic_objective(x: ArrayView2<f64>, y: &[f64], weights: &[f64], intercept: f64, lambda: f64) -> f64 {
    let m = x.dot(&ArrayView1::from(weights)) + intercept;
    let n = y.len() as f64;
    let loss: f64 = m
        .iter()
        .zip(y)
        .map(|(&mi, &yi)| if yi > 0.5 { softplus(-mi) } else { softplus(mi) })
        .sum();
    loss / n + 0.5 * lambda * weights.iter().map(|v| v * v).sum::<f64>()
}

/// Gradient of [`logistic_objective`]: `(∇w, ∂b)`.
pub fn logistic_gradient(
    x: ArrayView2<f64>,
    y: &[f64],
    weights: &[f64],
    intercept: f64,
    lambda: f64,
) -> (Vec<f64>, f64) {
    let m = x.dot(&ArrayView1::from(weights)) + intercept;
    let n = y.len() as f64;
    let resid: Array1<f64> = m.iter().zip(y).map(|(&mi, &yi)| sigmoid(mi) - yi).collect();
    let gw = x.t().dot(&resid) / n;
    let gw: Vec<f64> = gw.iter().zip(weights).map(|(g, w)| g + lambda * w).collect();
    (gw, resid.sum() / n)
}

fn norm2(v: &[f64], extra: f64) -> f64 {
    (v.iter().map(|a| a * a).sum::<f64>() + extra * extra).sqrt()
}

/// L2-regularized logistic regression by Newton–CG. Labels must be 0/1
/// with both classes present and `lambda > 0`.
pub fn logistic_fit(
    x: ArrayView2<f64>,
    y: &[f64],
    lambda: f64,
    warm_start: Option<(&[f64], f64)>,
    opts: &SolverOptions,
) -> Result<LinearFit, FitError> {
    check_xy(x, y)?;
    check_labels(y)?;
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(FitError::InvalidLambda(lambda));
    }
    let (n, d) = x.dim();
    let nf = n as f64;
    let xo = x.to_owned();

    let (mut w, mut b) = match warm_start {
        Some((w0, _)) if w0.len() != d => {
            return Err(FitError::DimMismatch {
                expected: d,
                got: w0.len(),
            })
        }
        Some((w0, b0)) => (w0.to_vec(), b0),
        None => {
            let p = y.iter().sum::<f64>() / nf;
            (vec![0.0; d], (p / (1.0 - p)).ln())
        }
    };

    let mut f = logistic_objective(x, y, &w, b, lambda);
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let (gw, gb) = logistic_gradient(x, y, &w, b, lambda);
        let gnorm = norm2(&gw, gb);
        if gnorm <= opts.tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            break;
        }
        iterations += 1;

        // Hessian curvature weights at the current point
        let m = margins(&xo, &w, b);
        let curv: Array1<f64> = m.mapv(|t| {
            let s = sigmoid(t);
            s * (1.0 - s)
        });
        let hess_vec = |vw: &[f64], vb: f64| -> (Vec<f64>, f64) {
            let xv = margins(&xo, vw, vb);
            let dxv = &curv * &xv;
            let hw = xo.t().dot(&dxv) / nf;
            let hw: Vec<f64> = hw.iter().zip(vw).map(|(h, v)| h + lambda * v).collect();
            (hw, dxv.sum() / nf)
        };

        // conjugate gradients on H p = -g
        let forcing = gnorm.sqrt().min(0.5) * gnorm;
        let mut pw = vec![0.0; d];
        let mut pb = 0.0;
        let mut rw: Vec<f64> = gw.iter().map(|g| -g).collect();
        let mut rb = -gb;
        let mut sw = rw.clone();
        let mut sb = rb;
        let mut rr = norm2(&rw, rb).powi(2);
        for _ in 0..(d + 1).max(10) {
            if rr.sqrt() <= forcing {
                break;
            }
            let (hw, hb) = hess_vec(&sw, sb);
            let curvature: f64 = sw.iter().zip(&hw).map(|(a, c)| a * c).sum::<f64>() + sb * hb;
            if curvature <= 0.0 {
                break;
            }
            let alpha = rr / curvature;
            for k in 0..d {
                pw[k] += alpha * sw[k];
                rw[k] -= alpha * hw[k];
            }
            pb += alpha * sb;
            rb -= alpha * hb;
            let rr_new = norm2(&rw, rb).powi(2);
            let beta = rr_new / rr;
            for k in 0..d {
                sw[k] = rw[k] + beta * sw[k];
            }
            sb = rb + beta * sb;
            rr = rr_new;
        }
        let slope: f64 = gw.iter().zip(&pw).map(|(g, p)| g * p).sum::<f64>() + gb * pb;
        if slope.is_nan() || slope >= 0.0 {
            // fall back to steepest descent
            pw = gw.iter().map(|g| -g).collect();
            pb = -gb;
        }
        let slope: f64 = gw.iter().zip(&pw).map(|(g, p)| g * p).sum::<f64>() + gb * pb;

        // Armijo backtracking
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let wn: Vec<f64> = w.iter().zip(&pw).map(|(a, p)| a + step * p).collect();
            let bn = b + step * pb;
            let fn_ = logistic_objective(x, y, &wn, bn, lambda);
            if fn_ <= f + 1e-4 * step * slope {
                w = wn;
                b = bn;
                f = fn_;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // no representable decrease left
            let (gw, gb) = logistic_gradient(x, y, &w, b, lambda);
            converged = norm2(&gw, gb) <= opts.tol;
            break;
        }
    }
    if !converged {
        log::warn!("logistic solver stopped after {iterations} iterations at lambda {lambda:e}");
    }
    Ok(LinearFit {
        weights: w,
        intercept: b,
        lambda,
        iterations,
        converged,
        objective_trace: Vec::new(),
    })
}

/// Warm-started logistic solutions along `grid`.
pub fn logistic_path(
    x: ArrayView2<f64>,
    y: &[f64],
    grid: &[f64],
    opts: &SolverOptions,
) -> Result<Vec<LinearFit>, FitError> {
    let mut out: Vec<LinearFit> = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let warm = out.last().map(|f| (f.weights.as_slice(), f.intercept));
        out.push(logistic_fit(x, y, lambda, warm, opts)?);
    }
    Ok(out)
}

/// `k` log-spaced values from `max` down to `max · ratio`.
pub fn log_grid(max: f64, ratio: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![max];
    }
    let (hi, lo) = (max.ln(), (max * ratio).ln());
    let step = (lo - hi) / (k - 1) as f64;
    (0..k).map(|i| (hi + step * i as f64).exp()).collect()
}

/// Regularization path for a task: Lasso starts at λ_max (all-zero
/// solution), logistic at the fixed anchor 1.0. Both span three decades.
pub fn lambda_grid(x: ArrayView2<f64>, y: &[f64], task: ProbeTask) -> Vec<f64> {
    let max = match task {
        ProbeTask::Regression => {
            let m = lasso_lambda_max(x, y);
            // constant target or all-zero design: every λ gives w = 0
            if m > 0.0 && m.is_finite() {
                m
            } else {
                1.0
            }
        }
        ProbeTask::Classification => 1.0,
    };
    log_grid(max, GRID_RATIO, GRID_LEN)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub n_train: usize,
    pub seed: u64,
    pub solver_iterations: usize,
    #[serde(default = "default_true")]
    pub converged: bool,
}

fn default_true() -> bool {
    true
}

/// A fitted probe together with everything needed to apply it to raw
/// embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub task: ProbeTask,
    pub backend_name: String,
    pub dimension: Dimension,
    pub lambda: f64,
    pub intercept: f64,
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// Scores `>=` this are the positive class; classification only.
    pub binarization_threshold: Option<u8>,
    pub train_meta: TrainMeta,
}

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid model: {0}")]
    Invalid(String),
}

impl ProbeModel {
    pub fn standardizer(&self) -> Standardizer {
        Standardizer {
            means: self.means.clone(),
            stds: self.stds.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn n_nonzero(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }

    pub fn validate(&self) -> Result<(), ModelIoError> {
        if self.weights.len() != self.means.len() || self.weights.len() != self.stds.len() {
            return Err(ModelIoError::Invalid(format!(
                "weights/means/stds lengths {}/{}/{} differ",
                self.weights.len(),
                self.means.len(),
                self.stds.len()
            )));
        }
        match (self.task, self.binarization_threshold) {
            (ProbeTask::Classification, None) => {
                Err(ModelIoError::Invalid("classification model without threshold".into()))
            }
            (ProbeTask::Classification, Some(t)) if !(2..=7).contains(&t) => {
                Err(ModelIoError::Invalid(format!("threshold {t} outside 2..=7")))
            }
            _ => Ok(()),
        }
    }

    /// Linear score `wᵀ·standardize(x) + b` per row.
    pub fn decision_function(&self, x_raw: ArrayView2<f64>) -> Result<Vec<f64>, FitError> {
        let xs = self.standardizer().transform(x_raw)?;
        Ok(margins(&xs, &self.weights, self.intercept).to_vec())
    }

    /// Regression: the linear score. Classification: its sigmoid.
    pub fn predict(&self, x_raw: ArrayView2<f64>) -> Result<Vec<f64>, FitError> {
        let m = self.decision_function(x_raw)?;
        Ok(match self.task {
            ProbeTask::Regression => m,
            ProbeTask::Classification => m.into_iter().map(sigmoid).collect(),
        })
    }

    pub fn to_json(&self) -> Result<String, ModelIoError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelIoError> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), ModelIoError> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ModelIoError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
