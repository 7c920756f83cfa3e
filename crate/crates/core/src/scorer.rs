//! k-nearest-neighbour cosine anomaly score against a nominal reference set.
//!
//! The score of an observation is the mean of its `k` smallest cosine
//! distances to the reference embeddings. With `k = 1` this is the plain
//! nearest-neighbour distance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_distance, cosine_distance_unchecked, EmbeddingError, EmbeddingSet, EmbeddingVector};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScorerError {
    #[error("k = {k} outside [1, {reference_size}]")]
    KOutOfRange { k: usize, reference_size: usize },
    #[error("dimension mismatch: reference has {expected}, query has {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
}

/// Neighbour count plus the nominal reference set.
#[derive(Debug, Clone, Copy)]
pub struct ScorerConfig<'a> {
    k: usize,
    reference: &'a EmbeddingSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScore {
    pub value: f64,
    pub observation_index: usize,
}

impl<'a> ScorerConfig<'a> {
    pub fn new(k: usize, reference: &'a EmbeddingSet) -> Result<Self, ScorerError> {
        if k == 0 || k > reference.len() {
            return Err(ScorerError::KOutOfRange {
                k,
                reference_size: reference.len(),
            });
        }
        Ok(Self { k, reference })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn reference(&self) -> &'a EmbeddingSet {
        self.reference
    }

    fn check_dim(&self, dim: usize) -> Result<(), ScorerError> {
        if dim != self.reference.dim() {
            return Err(ScorerError::DimensionMismatch {
                expected: self.reference.dim(),
                actual: dim,
            });
        }
        Ok(())
    }

    fn score_unchecked(&self, o: &EmbeddingVector) -> f64 {
        let mut distances: Vec<f64> = self.reference.iter().map(|r| cosine_distance_unchecked(o, r)).collect();
        let k = self.k;
        if k < distances.len() {
            distances.select_nth_unstable_by(k - 1, f64::total_cmp);
        }
        distances[..k].iter().sum::<f64>() / k as f64
    }
}

pub fn score(o: &EmbeddingVector, cfg: &ScorerConfig<'_>) -> Result<AnomalyScore, ScorerError> {
    cfg.check_dim(o.dim())?;
    Ok(AnomalyScore {
        value: cfg.score_unchecked(o),
        observation_index: 0,
    })
}

/// Scores every vector of `set`, in parallel; output order matches input order.
pub fn score_set(set: &EmbeddingSet, cfg: &ScorerConfig<'_>) -> Result<Vec<AnomalyScore>, ScorerError> {
    cfg.check_dim(set.dim())?;
    Ok(set
        .vectors()
        .par_iter()
        .enumerate()
        .map(|(observation_index, o)| AnomalyScore {
            value: cfg.score_unchecked(o),
            observation_index,
        })
        .collect())
}

/// Reference implementation: every distance, full sort, mean of the first `k`.
pub fn brute_force_score(o: &EmbeddingVector, cfg: &ScorerConfig<'_>) -> Result<AnomalyScore, ScorerError> {
    let mut distances = cfg
        .reference
        .iter()
        .map(|r| cosine_distance(o, r))
        .collect::<Result<Vec<f64>, EmbeddingError>>()
        .map_err(|_| ScorerError::DimensionMismatch {
            expected: cfg.reference.dim(),
            actual: o.dim(),
        })?;
    distances.sort_by(f64::total_cmp);
    let value = distances.iter().take(cfg.k).sum::<f64>() / cfg.k as f64;
    Ok(AnomalyScore {
        value,
        observation_index: 0,
    })
}
