//! End-to-end degradation prediction: calibrate on validation scores, flag
//! factor observations above the threshold, and predict each factor's
//! success rate as one minus its anomaly rate.

use std::collections::HashSet;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformal::{calibrate, CalibrationError, CalibrationResult, Threshold};
use crate::embedding::EmbeddingSet;
use crate::manifest::{Manifest, ManifestError, ManifestSets, ObservationSource};
use crate::ranking::average_ranks;
use crate::scorer::{score_set, ScorerConfig, ScorerError};

/// Factor sets smaller than this get a warning in the report.
pub const SMALL_FACTOR_SET: usize = 30;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error("factor set '{0}' is empty")]
    EmptyFactorSet(String),
    #[error("duplicate factor '{0}'")]
    DuplicateFactor(String),
    #[error("cannot select {requested} factors out of {available}")]
    SelectionTooLarge { requested: usize, available: usize },
    #[error("selection size must be positive")]
    EmptySelection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorPrediction {
    pub factor: String,
    pub anomaly_rate: f64,
    pub predicted_success: f64,
    pub n_observations: usize,
    pub flagged: usize,
    pub source: ObservationSource,
}

impl FactorPrediction {
    pub fn new(factor: impl Into<String>, flagged: usize, n_observations: usize, source: ObservationSource) -> Self {
        let anomaly_rate = flagged as f64 / n_observations as f64;
        Self {
            factor: factor.into(),
            anomaly_rate,
            predicted_success: 1.0 - anomaly_rate,
            n_observations,
            flagged,
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RedTeamReport {
    pub calibration: CalibrationResult,
    pub predictions: Vec<FactorPrediction>,
    pub k: usize,
    pub reference_size: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    pub k: usize,
    /// Supersedes the manifest's `r_nom` when set.
    pub r_nom_override: Option<f64>,
}

impl PredictOptions {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            r_nom_override: None,
        }
    }

    pub fn with_r_nom(mut self, r_nom: f64) -> Self {
        self.r_nom_override = Some(r_nom);
        self
    }
}

/// Number of observations in `set` scoring strictly above `tau`.
pub fn flag_count(set: &EmbeddingSet, cfg: &ScorerConfig<'_>, tau: Threshold) -> Result<usize, ScorerError> {
    if tau.is_infinite() {
        // still validate dimensions
        if set.dim() != cfg.reference().dim() {
            return Err(ScorerError::DimensionMismatch {
                expected: cfg.reference().dim(),
                actual: set.dim(),
            });
        }
        return Ok(0);
    }
    Ok(score_set(set, cfg)?.iter().filter(|s| tau.flags(s.value)).count())
}

pub fn anomaly_rate(set: &EmbeddingSet, cfg: &ScorerConfig<'_>, tau: Threshold) -> Result<f64, PredictError> {
    if set.is_empty() {
        return Err(PredictError::EmptyFactorSet(set.label().to_string()));
    }
    Ok(flag_count(set, cfg, tau)? as f64 / set.len() as f64)
}

/// Scores the validation set against `nominal` and calibrates the threshold.
pub fn calibrate_sets(
    nominal: &EmbeddingSet,
    validation: &EmbeddingSet,
    k: usize,
    r_nom: f64,
) -> Result<CalibrationResult, PredictError> {
    let cfg = ScorerConfig::new(k, nominal)?;
    let scores: Vec<f64> = score_set(validation, &cfg)?.iter().map(|s| s.value).collect();
    Ok(calibrate(&scores, r_nom)?)
}

/// Calibration followed by one prediction per factor, in the given order.
pub fn predict_sets(
    nominal: &EmbeddingSet,
    validation: &EmbeddingSet,
    factors: &[(String, EmbeddingSet)],
    k: usize,
    r_nom: f64,
    source: ObservationSource,
) -> Result<RedTeamReport, PredictError> {
    let mut seen = HashSet::new();
    for (name, _) in factors {
        if !seen.insert(name.as_str()) {
            return Err(PredictError::DuplicateFactor(name.clone()));
        }
    }

    let calibration = calibrate_sets(nominal, validation, k, r_nom)?;
    let cfg = ScorerConfig::new(k, nominal)?;
    let tau = calibration.tau;

    let predictions = factors
        .par_iter()
        .map(|(name, set)| {
            let flagged = flag_count(set, &cfg, tau)?;
            Ok(FactorPrediction::new(name.clone(), flagged, set.len(), source))
        })
        .collect::<Result<Vec<_>, PredictError>>()?;

    let warnings = predictions
        .iter()
        .filter(|p| p.n_observations < SMALL_FACTOR_SET)
        .map(|p| {
            let message = format!(
                "factor '{}' has only {} observations (< {SMALL_FACTOR_SET}); its anomaly rate is noisy",
                p.factor, p.n_observations
            );
            warn!("{message}");
            message
        })
        .collect();

    Ok(RedTeamReport {
        calibration,
        predictions,
        k,
        reference_size: nominal.len(),
        warnings,
    })
}

pub fn predict_loaded(
    sets: &ManifestSets,
    manifest: &Manifest,
    options: &PredictOptions,
) -> Result<RedTeamReport, PredictError> {
    let r_nom = options.r_nom_override.unwrap_or(manifest.r_nom);
    predict_sets(
        &sets.nominal,
        &sets.validation,
        &sets.factors,
        options.k,
        r_nom,
        manifest.source,
    )
}

pub fn predict_all(manifest: &Manifest, options: &PredictOptions) -> Result<RedTeamReport, PredictError> {
    let sets = manifest.load_sets()?;
    predict_loaded(&sets, manifest, options)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFactor {
    /// 1 is the worst predicted success; ties share their average rank.
    pub rank: f64,
    pub factor: String,
}

/// Factors ordered from worst to best predicted success.
///
/// Tied factors share an average rank and are listed by name.
pub fn rank_predictions(predictions: &[FactorPrediction]) -> Vec<RankedFactor> {
    let values: Vec<f64> = predictions.iter().map(|p| p.predicted_success).collect();
    let ranks = average_ranks(&values);
    let mut ranked: Vec<(f64, &FactorPrediction)> = ranks.into_iter().zip(predictions).collect();
    ranked.sort_by(|(ra, a), (rb, b)| ra.total_cmp(rb).then_with(|| a.factor.cmp(&b.factor)));
    ranked
        .into_iter()
        .map(|(rank, p)| RankedFactor {
            rank,
            factor: p.factor.clone(),
        })
        .collect()
}

pub fn rank_factors(report: &RedTeamReport) -> Vec<RankedFactor> {
    rank_predictions(&report.predictions)
}

/// The `n` factors with the lowest predicted success (ties by name).
pub fn select_worst(report: &RedTeamReport, n: usize) -> Result<Vec<String>, PredictError> {
    if n == 0 {
        return Err(PredictError::EmptySelection);
    }
    if n > report.predictions.len() {
        return Err(PredictError::SelectionTooLarge {
            requested: n,
            available: report.predictions.len(),
        });
    }
    let mut sorted: Vec<&FactorPrediction> = report.predictions.iter().collect();
    sorted.sort_by(|a, b| {
        a.predicted_success
            .total_cmp(&b.predicted_success)
            .then_with(|| a.factor.cmp(&b.factor))
    });
    Ok(sorted.into_iter().take(n).map(|p| p.factor.clone()).collect())
}

/// Wire form of a [`RedTeamReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub tau: Threshold,
    pub k: usize,
    pub r_nom: f64,
    pub predictions: Vec<PredictionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub factor: String,
    pub anomaly_rate: f64,
    pub predicted_success: f64,
    pub n: usize,
    pub source: ObservationSource,
}

impl RedTeamReport {
    pub fn to_document(&self) -> ReportDocument {
        ReportDocument {
            tau: self.calibration.tau,
            k: self.k,
            r_nom: self.calibration.r_nom,
            predictions: self
                .predictions
                .iter()
                .map(|p| PredictionRecord {
                    factor: p.factor.clone(),
                    anomaly_rate: p.anomaly_rate,
                    predicted_success: p.predicted_success,
                    n: p.n_observations,
                    source: p.source,
                })
                .collect(),
        }
    }
}

impl ReportDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Rebuilds predictions; flagged counts are recovered from rate and size.
    pub fn predictions(&self) -> Vec<FactorPrediction> {
        self.predictions
            .iter()
            .map(|r| {
                let flagged = (r.anomaly_rate * r.n as f64).round() as usize;
                FactorPrediction {
                    factor: r.factor.clone(),
                    anomaly_rate: r.anomaly_rate,
                    predicted_success: r.predicted_success,
                    n_observations: r.n,
                    flagged,
                    source: r.source,
                }
            })
            .collect()
    }
}
