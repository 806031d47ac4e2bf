//! Log-scale regression metrics and the evaluation report.
//!
//! All metrics operate on base-2 logarithms of shifted values,
//! `log2(x + 1)`; the shift makes zero labels well-defined.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::Write;

/// log2(x + 1).
pub fn log2p1(x: f64) -> f64 {
    (x + 1.0).log2()
}

fn check_pairs(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::Validation("metrics: empty input".into()));
    }
    if y.len() != y_hat.len() {
        return Err(Error::Validation(format!(
            "metrics: {} targets vs {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    if y.iter().chain(y_hat).any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Validation("metrics: values must be finite and >= 0".into()));
    }
    Ok(())
}

/// Mean squared error of base-2 logs of shifted values.
pub fn msle(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pairs(y, y_hat)?;
    let s: f64 =
        y.iter().zip(y_hat).map(|(&a, &b)| (log2p1(a) - log2p1(b)).powi(2)).sum();
    Ok(s / y.len() as f64)
}

/// Mean absolute error on the same log scale.
pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pairs(y, y_hat)?;
    let s: f64 = y.iter().zip(y_hat).map(|(&a, &b)| (log2p1(a) - log2p1(b)).abs()).sum();
    Ok(s / y.len() as f64)
}

/// Coefficient of determination on the log scale. 1 for perfect
/// predictions; 0 for the constant log-mean predictor.
pub fn r_squared(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_pairs(y, y_hat)?;
    let logs: Vec<f64> = y.iter().map(|&v| log2p1(v)).collect();
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let ss_tot: f64 = logs.iter().map(|l| (l - mean).powi(2)).sum();
    let ss_res: f64 =
        logs.iter().zip(y_hat).map(|(&l, &b)| (l - log2p1(b)).powi(2)).sum();
    if ss_res == 0.0 {
        return Ok(1.0);
    }
    Ok(1.0 - ss_res / ss_tot.max(f64::MIN_POSITIVE))
}

/// One evaluated cascade.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PredRecord {
    pub id: String,
    pub y: f64,
    pub y_hat: f64,
}

/// Per-epoch training curve entry.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_msle: f64,
}

/// Metrics plus per-cascade predictions; optionally the training curves of
/// the run that produced the model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub msle: f64,
    pub mae: f64,
    pub r2: f64,
    pub per_cascade: Vec<PredRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curves: Vec<EpochStats>,
}

impl EvalReport {
    pub fn from_records(per_cascade: Vec<PredRecord>) -> Result<Self> {
        let y: Vec<f64> = per_cascade.iter().map(|r| r.y).collect();
        let y_hat: Vec<f64> = per_cascade.iter().map(|r| r.y_hat).collect();
        Ok(EvalReport {
            msle: msle(&y, &y_hat)?,
            mae: mae(&y, &y_hat)?,
            r2: r_squared(&y, &y_hat)?,
            per_cascade,
            curves: Vec::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// CSV with one (id, y, y_hat) row per cascade.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "id,y,y_hat")?;
        for r in &self.per_cascade {
            writeln!(w, "{},{},{}", r.id, r.y, r.y_hat)?;
        }
        Ok(())
    }
}
