//! Predictive red teaming for visuomotor policies.
//!
//! Environmental factors (lighting, background, distractors, ...) are
//! represented by sets of edited or real observations, embedded by the
//! policy. Each factor's anomaly rate against a nominal reference set,
//! thresholded by split conformal calibration, predicts the policy's success
//! rate under that factor.

pub mod conformal;
pub mod edit;
pub mod embedding;
pub mod evaluation;
pub mod manifest;
pub mod predictor;
pub mod ranking;
pub mod scorer;
pub mod synth;

pub use conformal::{calibrate, nominal_anomaly_rate, CalibrationError, CalibrationResult, Threshold};
pub use embedding::{
    cosine_distance, load_embedding_set, save_embedding_set, EmbeddingError, EmbeddingSet, EmbeddingVector,
};
pub use evaluation::{avg_prediction_error, evaluate, spearman_rho, EvaluationReport, MetricError};
pub use manifest::{Manifest, ManifestError, ObservationSource};
pub use predictor::{
    anomaly_rate, predict_all, rank_factors, select_worst, FactorPrediction, PredictError, PredictOptions,
    RedTeamReport, ReportDocument,
};
pub use scorer::{brute_force_score, score, score_set, AnomalyScore, ScorerConfig, ScorerError};
pub use synth::{
    generate_world, run_ablation, run_ablation_manifest, sample_world, AblationGrid, AblationTable, Link, SynthError,
    SynthFactor, SynthWorldSpec,
};
