//! Checks shared by the integration tests and the acceptance runner.
//! Every check returns `Ok(summary)` or `Err(reason)`. The oracles here are
//! written from the definitions and do not call back into the code under
//! test except for the function being checked.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vqd_probe::corpus::{Category, Dimension, Manifest};
use vqd_probe::embedstore::{EmbedError, EmbeddingTable};
use vqd_probe::harness::{self, Dataset, ExperimentConfig, TaskSelection, TrainGroup, ZeroShotOptions};
use vqd_probe::linmod::{self, SolverOptions};
use vqd_probe::metrics::{self, BootstrapConfig, MetricKind};
use vqd_probe::modelsel;
use vqd_probe::synth::{self, SynthCorpus, SynthSpec};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian_matrix(r: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| r.sample(StandardNormal))
}

/// `(1/n) xⱼᵀ (Xw + b − y)` computed with plain loops.
fn lasso_smooth_gradient(x: &Array2<f64>, y: &[f64], w: &[f64], b: f64) -> Vec<f64> {
    let (n, d) = x.dim();
    let mut resid = vec![0.0; n];
    for i in 0..n {
        let mut p = b;
        for j in 0..d {
            p += x[[i, j]] * w[j];
        }
        resid[i] = p - y[i];
    }
    (0..d)
        .map(|j| (0..n).map(|i| x[[i, j]] * resid[i]).sum::<f64>() / n as f64)
        .collect()
}

/// Largest violation of the Lasso optimality conditions.
pub fn kkt_violation(x: &Array2<f64>, y: &[f64], w: &[f64], b: f64, lambda: f64) -> f64 {
    let g = lasso_smooth_gradient(x, y, w, b);
    g.iter()
        .zip(w)
        .map(|(&gj, &wj)| {
            if wj != 0.0 {
                (gj + lambda * wj.signum()).abs()
            } else {
                (gj.abs() - lambda).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

/// Random sparse regression problem; columns share a common factor so the
/// design is correlated.
pub fn random_lasso_problem(r: &mut ChaCha8Rng) -> (Array2<f64>, Vec<f64>) {
    let n = r.random_range(20..=200);
    let d = r.random_range(5..=64);
    let mut x = gaussian_matrix(r, n, d);
    let mix: f64 = r.random_range(0.0..0.7);
    for i in 0..n {
        let f: f64 = r.sample(StandardNormal);
        for j in 0..d {
            x[[i, j]] = (1.0 - mix) * x[[i, j]] + mix * f + 0.3 * j as f64 / d as f64;
        }
    }
    let beta: Vec<f64> = (0..d)
        .map(|_| if r.random_bool(0.3) { r.sample::<f64, _>(StandardNormal) * 2.0 } else { 0.0 })
        .collect();
    let y = (0..n)
        .map(|i| {
            let s: f64 = (0..d).map(|j| x[[i, j]] * beta[j]).sum();
            s + 1.5 + r.sample::<f64, _>(StandardNormal)
        })
        .collect();
    (x, y)
}

pub fn lasso_kkt_suite() -> Check {
    let mut r = rng(20_240_601);
    let opts = SolverOptions::lasso();
    let mut worst: f64 = 0.0;
    let mut capped = 0;
    for problem in 0..100 {
        let (x, y) = random_lasso_problem(&mut r);
        let lmax = linmod::lasso_lambda_max(x.view(), &y);
        let grid = linmod::log_grid(lmax, 1e-3, 50);
        let lambda = grid[(problem * 7) % grid.len()];
        let fit = linmod::lasso_fit(x.view(), &y, lambda, None, &opts).map_err(|e| e.to_string())?;
        if !fit.converged {
            capped += 1;
        }
        let v = kkt_violation(&x, &y, &fit.weights, fit.intercept, lambda);
        if v > 1e-4 {
            return Err(format!("problem {problem}: KKT violation {v:e} at lambda {lambda}"));
        }
        worst = worst.max(v);
        let ybar = y.iter().sum::<f64>() / y.len() as f64;
        for l in [lmax, lmax * 1.5] {
            let fit = linmod::lasso_fit(x.view(), &y, l, None, &opts).map_err(|e| e.to_string())?;
            if fit.weights.iter().any(|&w| w != 0.0) {
                return Err(format!("problem {problem}: nonzero weights at lambda {l} >= lambda_max"));
            }
            if (fit.intercept - ybar).abs() > 1e-12 {
                return Err(format!("problem {problem}: intercept {} != mean(y) {ybar}", fit.intercept));
            }
        }
    }
    Ok(format!("100 problems, max violation {worst:.2e}, {capped} stopped at the sweep cap"))
}

fn soft(z: f64, t: f64) -> f64 {
    z.signum() * (z.abs() - t).max(0.0)
}

/// Centered columns with `(1/n) XᵀX = I`, from Gram–Schmidt on random data.
pub fn orthonormal_design(r: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let m = v.iter().sum::<f64>() / n as f64;
        v.iter_mut().for_each(|a| *a -= m);
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = (v.iter().map(|a| a * a).sum::<f64>() / n as f64).sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Array2::from_shape_fn((n, d), |(i, j)| cols[j][i])
}

pub fn orthonormal_soft_threshold() -> Check {
    let mut r = rng(77);
    let mut worst: f64 = 0.0;
    // 8 × 2 design from Hadamard rows, then random designs
    let mut cases: Vec<(Array2<f64>, Vec<f64>, f64)> = Vec::new();
    let h = Array2::from_shape_fn((8, 2), |(i, j)| {
        let bits = (i & (j + 1)).count_ones();
        if bits % 2 == 0 { 1.0 } else { -1.0 }
    });
    cases.push((h, vec![0.3, -1.2, 0.8, 0.1, 2.0, -0.4, 0.9, 0.5], 0.1));
    for k in 0..30 {
        let n = r.random_range(20..=120);
        let d = r.random_range(2..=n.min(40) - 1);
        let x = orthonormal_design(&mut r, n, d);
        let y: Vec<f64> = (0..n).map(|_| r.sample::<f64, _>(StandardNormal) + 0.7).collect();
        let lambda = [0.0, 0.01, 0.05, 0.1, 0.3][k % 5];
        cases.push((x, y, lambda));
    }
    for (x, y, lambda) in &cases {
        let (n, d) = x.dim();
        let fit = linmod::lasso_fit(x.view(), y, *lambda, None, &SolverOptions::lasso()).map_err(|e| e.to_string())?;
        for j in 0..d {
            let z: f64 = (0..n).map(|i| x[[i, j]] * y[i]).sum::<f64>() / n as f64;
            let err = (fit.weights[j] - soft(z, *lambda)).abs();
            worst = worst.max(err);
        }
        let ybar = y.iter().sum::<f64>() / n as f64;
        worst = worst.max((fit.intercept - ybar).abs());
    }
    if worst <= 1e-8 {
        Ok(format!("{} designs, max deviation {worst:.2e}", cases.len()))
    } else {
        Err(format!("max deviation from soft-threshold {worst:e}"))
    }
}

pub fn warm_matches_cold() -> Check {
    let mut r = rng(5);
    let opts = SolverOptions::lasso();
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (x, y) = random_lasso_problem(&mut r);
        let grid = linmod::lambda_grid(x.view(), &y, linmod::ProbeTask::Regression);
        let path = linmod::lasso_path(x.view(), &y, &grid, &opts).map_err(|e| e.to_string())?;
        for (fit, &l) in path.iter().zip(&grid) {
            let cold = linmod::lasso_fit(x.view(), &y, l, None, &opts).map_err(|e| e.to_string())?;
            let a = linmod::lasso_objective(x.view(), &y, &fit.weights, fit.intercept, l);
            let b = linmod::lasso_objective(x.view(), &y, &cold.weights, cold.intercept, l);
            worst = worst.max((a - b).abs());
        }
    }
    if worst <= 1e-8 {
        Ok(format!("max objective gap {worst:.2e}"))
    } else {
        Err(format!("warm/cold objective gap {worst:e}"))
    }
}

/// Central differences of the logistic objective in every coordinate,
/// intercept last.
pub fn logistic_fd_gradient(x: &Array2<f64>, y: &[f64], w: &[f64], b: f64, lambda: f64, h: f64) -> Vec<f64> {
    let f = |w: &[f64], b: f64| linmod::logistic_objective(x.view(), y, w, b, lambda);
    let mut g = Vec::with_capacity(w.len() + 1);
    let mut wp = w.to_vec();
    for j in 0..w.len() {
        wp[j] = w[j] + h;
        let up = f(&wp, b);
        wp[j] = w[j] - h;
        let down = f(&wp, b);
        wp[j] = w[j];
        g.push((up - down) / (2.0 * h));
    }
    g.push((f(w, b + h) - f(w, b - h)) / (2.0 * h));
    g
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn random_logistic_problem(r: &mut ChaCha8Rng) -> (Array2<f64>, Vec<f64>) {
    let n = r.random_range(40..=200);
    let d = r.random_range(3..=30);
    let x = gaussian_matrix(r, n, d);
    let beta: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
    let mut y: Vec<f64> = (0..n)
        .map(|i| {
            let m: f64 = (0..d).map(|j| x[[i, j]] * beta[j]).sum::<f64>() - 0.5;
            let p = 1.0 / (1.0 + (-m).exp());
            f64::from(u8::from(r.random_bool(p)))
        })
        .collect();
    y[0] = 0.0;
    y[1] = 1.0;
    (x, y)
}

/// At the returned point the finite-difference gradient vanishes (so it
/// agrees with the analytic one, which is below the solver tolerance), and
/// at points around it the analytic gradient matches finite differences
/// to 1e-4 relative error.
pub fn logistic_gradient_fd() -> Check {
    let mut r = rng(31);
    let mut worst_rel: f64 = 0.0;
    let mut worst_stationary: f64 = 0.0;
    for _ in 0..20 {
        let (x, y) = random_logistic_problem(&mut r);
        let lambda = [1.0, 0.1, 0.01, 0.001][r.random_range(0..4)];
        let fit = linmod::logistic_fit(x.view(), &y, lambda, None, &SolverOptions::logistic()).map_err(|e| e.to_string())?;
        if !fit.converged {
            return Err(format!("logistic fit did not converge at lambda {lambda}"));
        }
        let (gw, gb) = linmod::logistic_gradient(x.view(), &y, &fit.weights, fit.intercept, lambda);
        let mut analytic = gw.clone();
        analytic.push(gb);
        let fd = logistic_fd_gradient(&x, &y, &fit.weights, fit.intercept, lambda, 1e-5);
        let diff: Vec<f64> = analytic.iter().zip(&fd).map(|(a, b)| a - b).collect();
        // absolute agreement at a stationary point: both gradients ~ 0
        worst_stationary = worst_stationary.max(norm(&diff)).max(norm(&analytic));
        for _ in 0..3 {
            let w: Vec<f64> = fit.weights.iter().map(|v| v + 0.1 * r.sample::<f64, _>(StandardNormal)).collect();
            let b = fit.intercept + 0.1 * r.sample::<f64, _>(StandardNormal);
            let (gw, gb) = linmod::logistic_gradient(x.view(), &y, &w, b, lambda);
            let mut a = gw;
            a.push(gb);
            let fd = logistic_fd_gradient(&x, &y, &w, b, lambda, 1e-5);
            let diff: Vec<f64> = a.iter().zip(&fd).map(|(p, q)| p - q).collect();
            worst_rel = worst_rel.max(norm(&diff) / norm(&fd));
        }
    }
    if worst_stationary > 1e-6 {
        return Err(format!("gradient at returned point {worst_stationary:e} (finite differences disagree or not stationary)"));
    }
    if worst_rel > 1e-4 {
        return Err(format!("relative gradient error {worst_rel:e}"));
    }
    Ok(format!("stationary gap {worst_stationary:.1e}, relative error {worst_rel:.1e}"))
}

/// Half-credit pair count.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
    let mut credit2: u64 = 0;
    let mut pairs: u64 = 0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            credit2 += if si > sj { 2 } else if si == sj { 1 } else { 0 };
        }
    }
    credit2 as f64 / 2.0 / pairs as f64
}

/// Twice the average rank, by counting: `2·#{xⱼ < xᵢ} + #{xⱼ = xᵢ} + 1`.
pub fn doubled_ranks(xs: &[f64]) -> Vec<i64> {
    xs.iter()
        .map(|&a| {
            let less = xs.iter().filter(|&&b| b < a).count() as i64;
            let eq = xs.iter().filter(|&&b| b == a).count() as i64;
            2 * less + eq + 1
        })
        .collect()
}

/// Spearman from integer rank arithmetic; `None` when a side is constant.
pub fn spearman_oracle(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as i64;
    let (ra, rb) = (doubled_ranks(a), doubled_ranks(b));
    // doubled mean rank is n + 1; work with 2·rank − (n + 1)
    let (mut sab, mut saa, mut sbb) = (0i64, 0i64, 0i64);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - (n + 1), y - (n + 1));
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0 || sbb == 0 {
        return None;
    }
    Some((sab as f64 / ((saa as f64) * (sbb as f64)).sqrt()).clamp(-1.0, 1.0))
}

/// Values on a coarse grid so ties are common.
fn tied_values(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let levels = r.random_range(2..=12);
    (0..n).map(|_| r.random_range(0..levels) as f64 * 0.25 - 1.0).collect()
}

pub fn metric_oracles() -> Check {
    let mut r = rng(1000);
    let mut n_spearman = 0;
    for case in 0..1000 {
        let n = r.random_range(2..=200);
        let scores = tied_values(&mut r, n);
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        labels[0] = true;
        labels[n - 1] = false;
        let got = metrics::auc(&scores, &labels).map_err(|e| e.to_string())?;
        let want = auc_pairs(&scores, &labels);
        if got != want {
            return Err(format!("fixture {case}: auc {got} vs pair count {want}"));
        }
        let truth = tied_values(&mut r, n);
        let ranks = metrics::average_ranks(&scores);
        let doubled = doubled_ranks(&scores);
        if ranks.iter().zip(&doubled).any(|(a, &b)| *a * 2.0 != b as f64) {
            return Err(format!("fixture {case}: average ranks differ from counting definition"));
        }
        match (metrics::spearman(&scores, &truth), spearman_oracle(&scores, &truth)) {
            (Ok(a), Some(b)) if a == b => n_spearman += 1,
            (Err(_), None) => {}
            (a, b) => return Err(format!("fixture {case}: spearman {a:?} vs oracle {b:?}")),
        }
    }
    Ok(format!("1000 fixtures exact ({n_spearman} with defined Spearman)"))
}

/// Percentile-interval coverage of a known AUC. Positives are
/// `U(0,1) + δ`, negatives `U(0,1)`, so the true AUC is `1 − (1 − δ)²/2`.
pub fn bootstrap_coverage(sims: usize, n_per_class: usize, n_boot: usize) -> (f64, f64) {
    let delta = 0.3;
    let truth = 1.0 - (1.0 - delta) * (1.0 - delta) / 2.0;
    let mut covered = 0;
    for s in 0..sims {
        let mut r = rng(9_000 + s as u64);
        let mut scores = Vec::with_capacity(2 * n_per_class);
        let mut labels = Vec::with_capacity(2 * n_per_class);
        for _ in 0..n_per_class {
            scores.push(r.random::<f64>() + delta);
            labels.push(1.0);
            scores.push(r.random::<f64>());
            labels.push(0.0);
        }
        let rep = metrics::bootstrap_metric(MetricKind::Auc, &scores, &labels, None, &BootstrapConfig::new(n_boot, s as u64))
            .expect("bootstrap succeeds");
        if rep.ci_low <= truth && truth <= rep.ci_high {
            covered += 1;
        }
    }
    (covered as f64 / sims as f64, truth)
}

pub fn bootstrap_coverage_check() -> Check {
    let (rate, truth) = bootstrap_coverage(200, 100, 1000);
    if (0.90..=0.985).contains(&rate) {
        Ok(format!("coverage {rate:.3} of true AUC {truth}"))
    } else {
        Err(format!("coverage {rate:.3} outside [0.90, 0.985]"))
    }
}

/// Exhaustive comparison against every alternative threshold on random
/// count profiles.
pub fn binarization_exhaustive() -> Check {
    let mut r = rng(2);
    let mut cases = 0;
    for _ in 0..20_000 {
        let mut counts = [0usize; 7];
        for c in counts.iter_mut() {
            if r.random_bool(0.7) {
                *c = r.random_range(0..40);
            }
        }
        let scores: Vec<u8> = counts
            .iter()
            .enumerate()
            .flat_map(|(i, &c)| std::iter::repeat_n(i as u8 + 1, c))
            .collect();
        if scores.is_empty() {
            continue;
        }
        cases += 1;
        let n = scores.len() as f64;
        let rate = |t: u8| scores.iter().filter(|&&s| s >= t).count() as f64 / n;
        let th = modelsel::binarize_threshold(&scores);
        let chosen = (rate(th.t) - 0.2).abs();
        for t in 2..=7u8 {
            let alt = (rate(t) - 0.2).abs();
            if alt < chosen - 1e-12 {
                return Err(format!("counts {counts:?}: chose t={} (rate {}) but t={t} has rate {}", th.t, rate(th.t), rate(t)));
            }
            if t < th.t && (alt - chosen).abs() <= 1e-12 {
                return Err(format!("counts {counts:?}: tie should go to t={t}, chose {}", th.t));
            }
        }
        if (th.positive_rate - rate(th.t)).abs() > 1e-15 {
            return Err("reported positive rate differs".into());
        }
    }
    Ok(format!("{cases} distributions"))
}

/// Planted spec used across end-to-end checks.
pub fn planted_spec(seed: u64) -> SynthSpec {
    SynthSpec::planted(200, 10, 64, seed, SynthSpec::sigma_for_correlation(0.95))
}

pub fn write_corpus(c: &SynthCorpus, dir: &Path) -> ExperimentConfig {
    c.write_to(dir).expect("corpus written");
    let mut cfg = ExperimentConfig::new(dir.join("manifest.csv"), dir.join("out"));
    cfg.embedding_paths = BTreeMap::from([(
        c.table.backend_name().to_string(),
        dir.join(format!("{}.vqde", c.table.backend_name())),
    )]);
    cfg
}

pub fn dataset_of(c: &SynthCorpus) -> Dataset {
    Dataset {
        manifest: c.manifest.clone(),
        tables: BTreeMap::from([(c.table.backend_name().to_string(), c.table.clone())]),
    }
}

pub fn config_for(c: &SynthCorpus, out: &Path, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(out.join("manifest.csv"), out.join("out"));
    cfg.embedding_paths = BTreeMap::from([(c.table.backend_name().to_string(), out.join("unused.vqde"))]);
    cfg.seed = seed;
    cfg.models_dir = Some(out.join("models"));
    cfg
}

pub fn planted_recovery(out: &Path) -> Check {
    let c = synth::generate(&planted_spec(7)).map_err(|e| e.to_string())?;
    let cfg = config_for(&c, out, 7);
    let t = harness::table1_on(&cfg, &dataset_of(&c)).map_err(|e| e.to_string())?;
    let mut lows = Vec::new();
    for d in Dimension::ALL {
        let rho = t.get("synth", d, MetricKind::Spearman).ok_or("missing spearman row")?.point;
        let auc = t.get("synth", d, MetricKind::Auc).ok_or("missing auc row")?.point;
        if rho < 0.9 || auc < 0.9 {
            lows.push(format!("{d}: rho {rho:.3}, auc {auc:.3}"));
        }
    }
    if lows.is_empty() {
        let min_rho = Dimension::ALL
            .iter()
            .map(|&d| t.get("synth", d, MetricKind::Spearman).unwrap().point)
            .fold(f64::INFINITY, f64::min);
        let min_auc = Dimension::ALL
            .iter()
            .map(|&d| t.get("synth", d, MetricKind::Auc).unwrap().point)
            .fold(f64::INFINITY, f64::min);
        Ok(format!("min rho {min_rho:.3}, min auc {min_auc:.3}"))
    } else {
        Err(lows.join("; "))
    }
}

pub fn null_recovery(out: &Path) -> Check {
    let spec = SynthSpec::null(200, 10, 64, 7, SynthSpec::sigma_for_correlation(0.95));
    let c = synth::generate(&spec).map_err(|e| e.to_string())?;
    let cfg = config_for(&c, out, 7);
    let t = harness::table1_on(&cfg, &dataset_of(&c)).map_err(|e| e.to_string())?;
    let mut bad = Vec::new();
    let mut summary = Vec::new();
    for d in Dimension::ALL {
        let rho = t.get("synth", d, MetricKind::Spearman).ok_or("missing spearman row")?.point;
        let auc = t.get("synth", d, MetricKind::Auc).ok_or("missing auc row")?.point;
        summary.push(format!("{d} {rho:.3}/{auc:.3}"));
        if rho.abs() >= 0.1 || !(0.45..=0.55).contains(&auc) {
            bad.push(format!("{d}: rho {rho:.3}, auc {auc:.3}"));
        }
    }
    if bad.is_empty() {
        Ok(summary.join(", "))
    } else {
        Err(bad.join("; "))
    }
}

pub fn generalization_grid(out: &Path) -> Check {
    let c = synth::generate(&planted_spec(11)).map_err(|e| e.to_string())?;
    let mut cfg = config_for(&c, out, 11);
    cfg.task = TaskSelection::Regression;
    let t = harness::table2_on(&cfg, &dataset_of(&c)).map_err(|e| e.to_string())?;
    if t.cells.len() != 12 {
        return Err(format!("{} cells, expected 12", t.cells.len()));
    }
    let mut worst: f64 = 0.0;
    for group in TrainGroup::ALL {
        for eval in Category::ALL {
            let cell = t.get("synth", group, eval).ok_or(format!("missing cell {} -> {eval}", group.label()))?;
            if cell.per_dimension.len() != 7 {
                return Err("cell does not cover 7 dimensions".into());
            }
        }
    }
    for train in Category::ALL {
        for eval in Category::ALL {
            let cross = t.get("synth", TrainGroup::Only(train), eval).unwrap().summary.mean;
            let same = t.get("synth", TrainGroup::Only(eval), eval).unwrap().summary.mean;
            worst = worst.max((cross - same).abs());
        }
    }
    if worst < 0.1 {
        Ok(format!("4x3 grid, max |cross - same| {worst:.3}"))
    } else {
        Err(format!("max |cross - same| {worst:.3}"))
    }
}

/// Trains regression probes on one planted corpus and scores a second
/// corpus drawn from the same planted directions with thresholded severity.
pub fn zero_shot(out: &Path) -> Check {
    let train_spec = planted_spec(7);
    let mut eval_spec = train_spec.clone();
    eval_spec.seed = 8;
    eval_spec.severity_levels = Some(2);
    let train = synth::generate(&train_spec).map_err(|e| e.to_string())?;
    let eval = synth::generate(&eval_spec).map_err(|e| e.to_string())?;
    let mut cfg = config_for(&train, out, 7);
    cfg.task = TaskSelection::Regression;
    let probes = harness::train_all(&cfg, &dataset_of(&train)).map_err(|e| e.to_string())?;
    let models: Vec<_> = probes.into_iter().map(|p| p.model).collect();
    let opts = ZeroShotOptions::default();
    let rep = harness::run_zeroshot(&models, &eval.manifest, &eval.table, "synth", "transfer", &opts)
        .map_err(|e| e.to_string())?;
    let sum = rep.sum_auc.point;

    let mut shuffled = eval.manifest.clone();
    let mut sev: Vec<Option<u32>> = shuffled.records.iter().map(|r| r.severity).collect();
    sev.shuffle(&mut rng(99));
    for (rec, s) in shuffled.records.iter_mut().zip(sev) {
        rec.severity = s;
    }
    let rep_null = harness::run_zeroshot(&models, &shuffled, &eval.table, "synth", "shuffled", &opts)
        .map_err(|e| e.to_string())?;
    let null = rep_null.sum_auc.point;
    let rows = rep.rows().len();
    if rows != 8 {
        return Err(format!("{rows} report rows, expected 8"));
    }
    if sum >= 0.9 && (0.45..=0.55).contains(&null) {
        Ok(format!("sum auc {sum:.3}, shuffled {null:.3}"))
    } else {
        Err(format!("sum auc {sum:.3} (need >= 0.9), shuffled {null:.3} (need [0.45, 0.55])"))
    }
}

pub fn bin_path() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_vqd-probe"))
}

pub fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(bin_path())
        .args(args)
        .env_remove("VQD_PROBE_SEED")
        .output()
        .expect("binary runs")
}

/// Every regular file below `dir`, relative path → bytes.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Runs the full CLI pipeline into `root`.
pub fn cli_pipeline(root: &Path) -> Result<(), String> {
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    let data = s(root.join("data"));
    let out = s(root.join("out"));
    let manifest = s(root.join("data/manifest.csv"));
    let emb = format!("synth={}", s(root.join("data/synth.vqde")));
    let zs = s(root.join("zs"));
    let zs_manifest = s(root.join("zs/manifest.csv"));
    let zs_emb = format!("synth={}", s(root.join("zs/synth.vqde")));
    let common = ["--manifest-path", &manifest, "--embedding-paths", &emb, "--output-dir", &out];
    let mut steps: Vec<Vec<&str>> = vec![
        vec!["synth", "--seed", "3", "--n-speakers", "150", "--dim", "16", "--emotion-shift", "0.5", "--out", &data],
        vec!["synth", "--seed", "4", "--n-speakers", "30", "--dim", "16", "--severity-levels", "4", "--out", &zs],
        ["stats"].into_iter().chain(common).collect(),
        ["train", "--seed", "3"].into_iter().chain(common).collect(),
        ["evaluate", "--seed", "3", "--n-boot", "200"].into_iter().chain(common).collect(),
        ["generalize", "--seed", "3", "--dimensions", "monopitch,breathiness"].into_iter().chain(common).collect(),
        [
            "zeroshot", "--seed", "3", "--n-boot", "200", "--dataset-name", "synthzs", "--zeroshot-manifest", &zs_manifest,
            "--zeroshot-embeddings", &zs_emb, "--severity-cut", "2",
        ]
        .into_iter()
        .chain(common)
        .collect(),
        ["affect", "--affect-manifest", &manifest, "--affect-embeddings", &emb].into_iter().chain(common).collect(),
    ];
    for step in steps.iter_mut() {
        let o = run_cli(step);
        if !o.status.success() {
            return Err(format!("`{}` failed: {}", step.join(" "), String::from_utf8_lossy(&o.stderr).trim()));
        }
    }
    Ok(())
}

/// Runs the pipeline twice in the same directory, so recorded paths and
/// config hashes coincide, and compares every output byte for byte.
pub fn determinism(tmp: &Path) -> Check {
    let root = tmp.join("run");
    cli_pipeline(&root)?;
    let sa = snapshot(&root);
    std::fs::remove_dir_all(&root).map_err(|e| e.to_string())?;
    cli_pipeline(&root)?;
    let sb = snapshot(&root);
    if sa.keys().ne(sb.keys()) {
        return Err("runs produced different file sets".into());
    }
    let mut compared = 0;
    for (k, v) in &sa {
        if sb[k] != *v {
            return Err(format!("{} differs between runs", k.display()));
        }
        compared += 1;
    }
    for required in ["out/table1.csv", "out/table2.csv", "out/zeroshot_synthzs.csv", "out/affect_profile.csv"] {
        if !sa.contains_key(Path::new(required)) {
            return Err(format!("{required} missing"));
        }
    }
    Ok(format!("{compared} files byte-identical"))
}

pub fn nan_payload_table() -> EmbeddingTable {
    let mut t = EmbeddingTable::new("probe-test", 6).unwrap();
    let specials = [
        f32::from_bits(0x7fc0_0001),
        f32::from_bits(0xffba_dbad),
        f32::from_bits(0x7f80_0001),
        -0.0,
        f32::from_bits(1),
        f32::INFINITY,
    ];
    t.push("nan_row", &specials).unwrap();
    t.push("ünïcode-id", &[1.0, -2.5, 3.25, f32::MAX, f32::MIN_POSITIVE, f32::NEG_INFINITY]).unwrap();
    t.push("", &[0.0; 6]).unwrap();
    t
}

pub fn format_roundtrip(tmp: &Path) -> Check {
    let t = nan_payload_table();
    let path = tmp.join("t.vqde");
    vqd_probe::embedstore::write_table(&t, &path).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let back = vqd_probe::embedstore::read_table(&path).map_err(|e| e.to_string())?;
    if !back.bitwise_eq(&t) || back.encode() != bytes {
        return Err("round trip is not bitwise identical".into());
    }
    if back.row(0)[0].to_bits() != 0x7fc0_0001 || back.row(0)[1].to_bits() != 0xffba_dbad {
        return Err("NaN payload bits changed".into());
    }
    for cut in 0..bytes.len() {
        match EmbeddingTable::decode(&bytes[..cut]) {
            Err(EmbedError::TruncatedFile(_)) => {}
            other => return Err(format!("prefix of {cut} bytes: {other:?}")),
        }
    }
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"VQDF");
    if !matches!(EmbeddingTable::decode(&bad), Err(EmbedError::BadMagic(m)) if &m == b"VQDF") {
        return Err("bad magic accepted".into());
    }
    Ok(format!("{} bytes, {} truncations rejected", bytes.len(), bytes.len()))
}

/// Loads a manifest written by the CLI synth command.
pub fn load(dir: &Path) -> Manifest {
    vqd_probe::corpus::load_manifest(dir.join("manifest.csv")).unwrap()
}
