//! Hand-crafted-feature ridge regression baseline.
//!
//! Extracts temporal and structural features from each observed cascade,
//! fits L2-regularized linear regression on the log-scale targets via the
//! normal equations, and reports the usual log-scale metrics.

use crate::error::{Error, Result};
use crate::metrics::{log2p1, EvalReport, PredRecord};
use crate::views::{CascadeViews, DatasetSplit};

/// Number of cumulative-popularity checkpoints inside the observation
/// window (counts of nodes joined by j * t_obs / K for j = 1..K).
pub const CUM_POP_INTERVALS: usize = 6;

/// Feature vector of one observed cascade:
/// mean repost interval (child join time minus parent join time),
/// observed size, cumulative popularity at the K interval checkpoints,
/// leaf count, mean node degree, mean and max root-path length.
pub fn extract_features(v: &CascadeViews, t_obs: f64) -> Vec<f64> {
    let n = v.observed_size;
    let times = v.times();
    let parents = v.graph.parents();

    let mut interval_sum = 0.0;
    let mut interval_count = 0usize;
    let mut depth = vec![0usize; n];
    let mut child_count = vec![0usize; n];
    for (b, p) in parents.iter().enumerate() {
        if let Some(a) = p {
            interval_sum += times[b] - times[*a];
            interval_count += 1;
            // Parents precede children in sequence order, so depths of
            // earlier indices are already final.
            depth[b] = depth[*a] + 1;
            child_count[*a] += 1;
        }
    }
    let mean_interval = if interval_count > 0 { interval_sum / interval_count as f64 } else { 0.0 };
    let leaf_count = child_count.iter().filter(|&&c| c == 0).count();
    // Undirected degree in a tree: 2 * (n - 1) endpoints over n nodes.
    let mean_degree = 2.0 * (n as f64 - 1.0) / n as f64;
    let mean_depth = depth.iter().sum::<usize>() as f64 / n as f64;
    let max_depth = depth.iter().max().copied().unwrap_or(0) as f64;

    let mut features = Vec::with_capacity(5 + CUM_POP_INTERVALS);
    features.push(mean_interval);
    features.push(n as f64);
    for j in 1..=CUM_POP_INTERVALS {
        let cutoff = t_obs * j as f64 / CUM_POP_INTERVALS as f64;
        features.push(times.iter().filter(|&&t| t <= cutoff).count() as f64);
    }
    features.push(leaf_count as f64);
    features.push(mean_degree);
    features.push(mean_depth);
    features.push(max_depth);
    features
}

/// Solve a dense symmetric positive system by Gaussian elimination with
/// partial pivoting. Returns None when a pivot collapses.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot_row][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in row + 1..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

/// Fitted ridge model: weights for each feature plus a trailing intercept.
#[derive(Debug, Clone)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    /// The regularization strength actually used (escalated if the normal
    /// equations were singular at the requested strength).
    pub lambda: f64,
}

impl RidgeModel {
    pub fn predict_log(&self, features: &[f64]) -> f64 {
        let (w, intercept) = self.weights.split_at(features.len());
        features.iter().zip(w).map(|(f, w)| f * w).sum::<f64>() + intercept[0]
    }
}

/// Fit ridge regression of `targets` on `rows` via the normal equations
/// (X'X + lambda I) w = X'y, intercept unpenalized. A singular system
/// escalates lambda tenfold (warning logged) until it solves.
pub fn ridge_fit(rows: &[Vec<f64>], targets: &[f64], lambda: f64) -> Result<RidgeModel> {
    if rows.is_empty() || rows.len() != targets.len() {
        return Err(Error::Validation("ridge_fit: empty or mismatched inputs".into()));
    }
    if lambda < 0.0 {
        return Err(Error::Validation("ridge_fit: lambda must be >= 0".into()));
    }
    let p = rows[0].len() + 1; // + intercept column
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for (row, &y) in rows.iter().zip(targets) {
        if row.len() + 1 != p {
            return Err(Error::Validation("ridge_fit: ragged feature rows".into()));
        }
        for i in 0..p {
            let xi = if i + 1 == p { 1.0 } else { row[i] };
            xty[i] += xi * y;
            for j in i..p {
                let xj = if j + 1 == p { 1.0 } else { row[j] };
                xtx[i][j] += xi * xj;
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            xtx[i][j] = xtx[j][i];
        }
    }

    let mut lam = lambda;
    for _attempt in 0..8 {
        let mut a = xtx.clone();
        for (i, row) in a.iter_mut().enumerate().take(p - 1) {
            row[i] += lam;
        }
        if let Some(weights) = solve_linear(a, xty.clone()) {
            if weights.iter().all(|w| w.is_finite()) {
                return Ok(RidgeModel { weights, lambda: lam });
            }
        }
        let next = if lam == 0.0 { 1e-8 } else { lam * 10.0 };
        log::warn!("ridge system singular at lambda={lam}; retrying with lambda={next}");
        lam = next;
    }
    Err(Error::Numerical("ridge normal equations remained singular".into()))
}

/// Fit the feature baseline on the training set and report test metrics.
pub fn feature_baseline(split: &DatasetSplit, lambda: f64, t_obs: Option<f64>) -> Result<EvalReport> {
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Validation("feature_baseline: empty train or test set".into()));
    }
    let t_obs = t_obs.unwrap_or_else(|| {
        split
            .train
            .iter()
            .flat_map(|v| v.times().last().copied())
            .fold(f64::MIN_POSITIVE, f64::max)
    });
    let rows: Vec<Vec<f64>> =
        split.train.iter().map(|v| extract_features(v, t_obs)).collect();
    let targets: Vec<f64> =
        split.train.iter().map(|v| log2p1(v.label as f64)).collect();
    let model = ridge_fit(&rows, &targets, lambda)?;
    let records = split
        .test
        .iter()
        .map(|v| {
            let log_pred = model.predict_log(&extract_features(v, t_obs));
            PredRecord {
                id: v.id.clone(),
                y: v.label as f64,
                y_hat: (log_pred.min(60.0).exp2() - 1.0).max(0.0),
            }
        })
        .collect();
    EvalReport::from_records(records)
}

/// Pick the lambda with the best validation MSLE, then report test metrics.
pub fn feature_baseline_grid(
    split: &DatasetSplit,
    lambdas: &[f64],
    t_obs: Option<f64>,
) -> Result<(f64, EvalReport)> {
    if lambdas.is_empty() || split.val.is_empty() {
        return Err(Error::Validation("feature_baseline_grid: need lambdas and a val set".into()));
    }
    let mut best: Option<(f64, f64)> = None; // (val msle, lambda)
    for &lam in lambdas {
        let val_split = DatasetSplit {
            train: split.train.clone(),
            val: Vec::new(),
            test: split.val.clone(),
            split_seed: split.split_seed,
            ratios: split.ratios,
        };
        let report = feature_baseline(&val_split, lam, t_obs)?;
        if best.is_none() || report.msle < best.unwrap().0 {
            best = Some((report.msle, lam));
        }
    }
    let (_, lambda) = best.expect("at least one lambda");
    Ok((lambda, feature_baseline(split, lambda, t_obs)?))
}

/// Test metrics of the constant predictor fixed at the training targets'
/// geometric mean (log-scale mean).
pub fn constant_log_mean_baseline(split: &DatasetSplit) -> Result<EvalReport> {
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::Validation("constant baseline: empty train or test set".into()));
    }
    let mean_log = split.train.iter().map(|v| log2p1(v.label as f64)).sum::<f64>()
        / split.train.len() as f64;
    let y_hat = (mean_log.exp2() - 1.0).max(0.0);
    let records = split
        .test
        .iter()
        .map(|v| PredRecord { id: v.id.clone(), y: v.label as f64, y_hat })
        .collect();
    EvalReport::from_records(records)
}
