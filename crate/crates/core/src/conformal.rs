//! Split-conformal anomaly threshold.
//!
//! Given `n` validation scores and a nominal success rate `r`, the threshold
//! is the `ceil((n + 1) r)`-th smallest score (1-based). When that index
//! exceeds `n` the threshold is infinite and nothing is ever flagged.
//! An observation is anomalous iff its score is strictly greater than the
//! threshold.

use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("r_nom {0} outside [0, 1]")]
    RNomOutOfRange(f64),
    #[error("non-finite validation score at index {0}")]
    NonFiniteScore(usize),
}

/// Anomaly threshold; serialized as a number or the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Finite(f64),
    Infinite,
}

impl Threshold {
    pub fn flags(&self, score: f64) -> bool {
        match self {
            Self::Finite(tau) => score > *tau,
            Self::Infinite => false,
        }
    }

    pub fn as_f64(&self) -> f64 {
        match self {
            Self::Finite(tau) => *tau,
            Self::Infinite => f64::INFINITY,
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Self::Infinite)
    }
}

impl From<f64> for Threshold {
    fn from(value: f64) -> Self {
        if value == f64::INFINITY {
            Self::Infinite
        } else {
            Self::Finite(value)
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Finite(tau) => write!(f, "{tau}"),
            Self::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Threshold {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Self::Finite(tau) => serializer.serialize_f64(*tau),
            Self::Infinite => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Threshold {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ThresholdVisitor;

        impl Visitor<'_> for ThresholdVisitor {
            type Value = Threshold;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a finite number or \"inf\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Threshold, E> {
                Ok(Threshold::Finite(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Threshold, E> {
                Ok(Threshold::Finite(v as f64))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Threshold, E> {
                Ok(Threshold::Finite(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Threshold, E> {
                if v == "inf" {
                    Ok(Threshold::Infinite)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }

        deserializer.deserialize_any(ThresholdVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub tau: Threshold,
    /// 1-based order statistic; may exceed `n_val`.
    pub quantile_index: usize,
    pub n_val: usize,
    pub r_nom: f64,
    pub validation_scores_sorted: Vec<f64>,
}

/// `ceil((n_val + 1) * r_nom)`, at least 1.
///
/// Products within 1e-9 of an integer are snapped to it first, so that e.g.
/// `10 * 0.7` yields 7 rather than 8.
pub fn quantile_index(n_val: usize, r_nom: f64) -> usize {
    let product = (n_val as f64 + 1.0) * r_nom;
    let nearest = product.round();
    let index = if (product - nearest).abs() <= 1e-9 {
        nearest
    } else {
        product.ceil()
    };
    (index as usize).max(1)
}

pub fn calibrate(validation_scores: &[f64], r_nom: f64) -> Result<CalibrationResult, CalibrationError> {
    if validation_scores.is_empty() {
        return Err(CalibrationError::EmptyValidation);
    }
    if !(0.0..=1.0).contains(&r_nom) {
        return Err(CalibrationError::RNomOutOfRange(r_nom));
    }
    if let Some(i) = validation_scores.iter().position(|s| !s.is_finite()) {
        return Err(CalibrationError::NonFiniteScore(i));
    }
    let mut sorted = validation_scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n_val = sorted.len();
    let index = quantile_index(n_val, r_nom);
    let tau = if index <= n_val {
        Threshold::Finite(sorted[index - 1])
    } else {
        Threshold::Infinite
    };
    Ok(CalibrationResult {
        tau,
        quantile_index: index,
        n_val,
        r_nom,
        validation_scores_sorted: sorted,
    })
}

/// Fraction of `scores` strictly above the calibrated threshold.
pub fn nominal_anomaly_rate(scores: &[f64], result: &CalibrationResult) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let flagged = scores.iter().filter(|&&s| result.tau.flags(s)).count();
    flagged as f64 / scores.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ninths() -> Vec<f64> {
        (1..=9).map(|i| f64::from(i) / 10.0).collect()
    }

    #[test]
    fn nine_scores_at_065() {
        let result = calibrate(&ninths(), 0.65).unwrap();
        assert_eq!(result.quantile_index, 7);
        assert_eq!(result.tau, Threshold::Finite(0.7));
        assert_eq!(nominal_anomaly_rate(&ninths(), &result), 2.0 / 9.0);
    }

    #[test]
    fn full_success_is_infinite() {
        let result = calibrate(&ninths(), 1.0).unwrap();
        assert_eq!(result.quantile_index, 10);
        assert!(result.tau.is_infinite());
        assert_eq!(nominal_anomaly_rate(&ninths(), &result), 0.0);
    }

    #[test]
    fn seventy_validation_scores() {
        assert_eq!(quantile_index(70, 0.65), 47);
        assert_eq!(quantile_index(70, 0.8), 57);
    }

    #[test]
    fn snaps_integral_products() {
        assert_eq!(quantile_index(9, 0.7), 7);
        assert_eq!(quantile_index(99, 0.35), 35);
        assert_eq!(quantile_index(9, 0.0), 1);
    }

    #[test]
    fn input_errors() {
        assert_eq!(calibrate(&[], 0.5), Err(CalibrationError::EmptyValidation));
        assert_eq!(calibrate(&[0.1], 1.2), Err(CalibrationError::RNomOutOfRange(1.2)));
        assert_eq!(
            calibrate(&[0.1, f64::NAN], 0.5),
            Err(CalibrationError::NonFiniteScore(1))
        );
    }

    #[test]
    fn threshold_json() {
        assert_eq!(serde_json::to_string(&Threshold::Infinite).unwrap(), "\"inf\"");
        assert_eq!(serde_json::to_string(&Threshold::Finite(0.25)).unwrap(), "0.25");
        let t: Threshold = serde_json::from_str("\"inf\"").unwrap();
        assert!(t.is_infinite());
        let t: Threshold = serde_json::from_str("1").unwrap();
        assert_eq!(t, Threshold::Finite(1.0));
        assert!(serde_json::from_str::<Threshold>("\"nan\"").is_err());
    }

    proptest! {
        #[test]
        fn invariants(scores in proptest::collection::vec(0.0f64..2.0, 1..200), r in 0.0f64..=1.0, dr in 0.0f64..0.5) {
            let result = calibrate(&scores, r).unwrap();
            prop_assert_eq!(result.n_val, scores.len());
            prop_assert!(result.validation_scores_sorted.windows(2).all(|w| w[0] <= w[1]));
            if result.quantile_index <= result.n_val {
                prop_assert_eq!(result.tau.as_f64(), result.validation_scores_sorted[result.quantile_index - 1]);
            } else {
                prop_assert!(result.tau.is_infinite());
            }

            let mut shuffled = scores.clone();
            shuffled.reverse();
            prop_assert_eq!(&calibrate(&shuffled, r).unwrap(), &result);

            let higher = calibrate(&scores, (r + dr).min(1.0)).unwrap();
            prop_assert!(higher.tau.as_f64() >= result.tau.as_f64());
        }
    }
}
