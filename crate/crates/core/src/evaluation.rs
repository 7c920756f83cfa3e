//! Agreement between predicted and measured per-factor success rates:
//! Spearman rank correlation and mean absolute prediction error.

use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::{FactorPrediction, RedTeamReport};
use crate::ranking::average_ranks;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 elements, got {0}")]
    TooFewElements(usize),
    /// Every element of one input shares the same rank.
    #[error("rank correlation undefined: zero rank variance")]
    Undefined,
    #[error("factor sets differ: '{0}' present on one side only")]
    KeyMismatch(String),
    #[error("no measured success for factor '{0}'")]
    MissingMeasured(String),
    #[error("value {value} for '{factor}' outside [0, 1]")]
    OutOfRange { factor: String, value: f64 },
}

/// Pearson correlation of the average-tie ranks of `x` and `y`.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::TooFewElements(x.len()));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = rx.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - mean, b - mean);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Undefined);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Mean of `|measured - predicted|` over factors; key sets must match.
pub fn avg_prediction_error(
    measured: &IndexMap<String, f64>,
    predicted: &IndexMap<String, f64>,
) -> Result<f64, MetricError> {
    if let Some(k) = measured.keys().find(|k| !predicted.contains_key(*k)) {
        return Err(MetricError::KeyMismatch(k.clone()));
    }
    if let Some(k) = predicted.keys().find(|k| !measured.contains_key(*k)) {
        return Err(MetricError::KeyMismatch(k.clone()));
    }
    for (factor, &value) in measured.iter().chain(predicted) {
        if !(0.0..=1.0).contains(&value) {
            return Err(MetricError::OutOfRange {
                factor: factor.clone(),
                value,
            });
        }
    }
    if measured.is_empty() {
        return Err(MetricError::TooFewElements(0));
    }
    let mut sum = ExactSum::default();
    for (k, &m) in measured {
        let (d, err) = two_sum(m, -predicted[k]);
        // d == 0 implies err == 0, so the sign of d is the sign of the difference
        let sign = if d < 0.0 { -1.0 } else { 1.0 };
        sum.add(sign * d);
        sum.add(sign * err);
    }
    Ok(sum.mean(measured.len()))
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Floating-point sum kept as non-overlapping partials, so no rounding
/// happens until the result is read.
#[derive(Debug, Default, Clone)]
struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    fn add(&mut self, mut x: f64) {
        let mut kept = 0;
        for i in 0..self.partials.len() {
            let mut y = self.partials[i];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let (hi, lo) = two_sum(x, y);
            if lo != 0.0 {
                self.partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        self.partials.truncate(kept);
        self.partials.push(x);
    }

    /// Correctly rounded except for exact halfway ties.
    fn value(&self) -> f64 {
        let mut rest = self.partials.iter().rev();
        let Some(&first) = rest.next() else {
            return 0.0;
        };
        let mut hi = first;
        let mut lo = 0.0;
        let mut remaining = rest.copied().collect::<Vec<_>>().into_iter();
        for y in remaining.by_ref() {
            let x = hi;
            hi = x + y;
            lo = y - (hi - x);
            if lo != 0.0 {
                break;
            }
        }
        // round-half-even fix-up, as in Python's math.fsum
        if let Some(next) = remaining.next() {
            if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
                let y = lo * 2.0;
                let x = hi + y;
                if y == x - hi {
                    hi = x;
                }
            }
        }
        hi
    }

    fn mean(&self, n: usize) -> f64 {
        let n = n as f64;
        let q = self.value() / n;
        // residual = sum - q * n, exactly
        let p = q * n;
        let e = q.mul_add(n, -p);
        let mut residual = self.clone();
        residual.add(-p);
        residual.add(-e);
        q + residual.value() / n
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorComparison {
    pub factor: String,
    pub predicted_success: f64,
    pub measured_success: f64,
    pub predicted_rank: f64,
    pub measured_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// `None` when the correlation is undefined (fewer than two factors or
    /// constant predictions or measurements).
    pub spearman_rho: Option<f64>,
    pub avg_prediction_error: f64,
    pub per_factor: Vec<FactorComparison>,
}

pub fn evaluate_predictions(
    predictions: &[FactorPrediction],
    measured: &IndexMap<String, f64>,
) -> Result<EvaluationReport, MetricError> {
    let mut measured_values = Vec::with_capacity(predictions.len());
    let mut measured_subset = IndexMap::new();
    let mut predicted_map = IndexMap::new();
    for p in predictions {
        let m = *measured
            .get(&p.factor)
            .ok_or_else(|| MetricError::MissingMeasured(p.factor.clone()))?;
        measured_values.push(m);
        measured_subset.insert(p.factor.clone(), m);
        predicted_map.insert(p.factor.clone(), p.predicted_success);
    }
    let predicted_values: Vec<f64> = predictions.iter().map(|p| p.predicted_success).collect();

    let spearman_rho = match spearman_rho(&predicted_values, &measured_values) {
        Ok(rho) => Some(rho),
        Err(MetricError::Undefined | MetricError::TooFewElements(_)) => None,
        Err(e) => return Err(e),
    };
    let avg_prediction_error = avg_prediction_error(&measured_subset, &predicted_map)?;

    let predicted_ranks = average_ranks(&predicted_values);
    let measured_ranks = average_ranks(&measured_values);
    let per_factor = predictions
        .iter()
        .enumerate()
        .map(|(i, p)| FactorComparison {
            factor: p.factor.clone(),
            predicted_success: p.predicted_success,
            measured_success: measured_values[i],
            predicted_rank: predicted_ranks[i],
            measured_rank: measured_ranks[i],
        })
        .collect();

    Ok(EvaluationReport {
        spearman_rho,
        avg_prediction_error,
        per_factor,
    })
}

pub fn evaluate(report: &RedTeamReport, measured: &IndexMap<String, f64>) -> Result<EvaluationReport, MetricError> {
    evaluate_predictions(&report.predictions, measured)
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("evaluation serializes") + "\n"
    }
}

/// Two-row summary table, one column per labelled report.
pub fn render_table(title: &str, columns: &[(&str, &EvaluationReport)]) -> String {
    let rows = [
        (
            "Spearman rho in [-1,1]",
            columns
                .iter()
                .map(|(_, r)| match r.spearman_rho {
                    Some(rho) => format!("{rho:.2} (up)"),
                    None => "undefined".to_string(),
                })
                .collect::<Vec<_>>(),
        ),
        (
            "Av. prediction error in [0,1]",
            columns
                .iter()
                .map(|(_, r)| format!("{:.2} (down)", r.avg_prediction_error))
                .collect(),
        ),
    ];

    let label_width = rows
        .iter()
        .map(|(l, _)| l.len())
        .chain(std::iter::once(title.len()))
        .max()
        .unwrap_or(0);
    let widths: Vec<usize> = columns
        .iter()
        .enumerate()
        .map(|(i, (name, _))| {
            rows.iter()
                .map(|(_, cells)| cells[i].len())
                .chain([name.len()])
                .max()
                .unwrap_or(0)
        })
        .collect();

    let mut out = String::new();
    let mut line = |label: &str, cells: &[&str]| {
        let mut row = format!("{label:<label_width$}");
        for (cell, w) in cells.iter().zip(&widths) {
            let _ = write!(row, "  {cell:<w$}");
        }
        out.push_str(row.trim_end());
        out.push('\n');
    };
    let header: Vec<&str> = columns.iter().map(|(name, _)| *name).collect();
    line(title, &header);
    for (label, cells) in &rows {
        let cells: Vec<&str> = cells.iter().map(String::as_str).collect();
        line(label, &cells);
    }
    out
}

/// Per-factor comparison rows, worst measured first.
pub fn render_factor_table(report: &EvaluationReport) -> String {
    let mut rows = report.per_factor.clone();
    rows.sort_by(|a, b| {
        a.measured_rank
            .total_cmp(&b.measured_rank)
            .then_with(|| a.factor.cmp(&b.factor))
    });
    let width = rows.iter().map(|r| r.factor.len()).chain([6]).max().unwrap_or(6);
    let mut out = format!(
        "{:<width$}  {:>9}  {:>8}  {:>9}  {:>8}\n",
        "factor", "predicted", "measured", "pred_rank", "meas_rank"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.2}  {:>8.2}  {:>9.1}  {:>8.1}",
            r.factor, r.predicted_success, r.measured_success, r.predicted_rank, r.measured_rank
        );
    }
    out
}
