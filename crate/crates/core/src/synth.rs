//! Synthetic embedding worlds with known ground truth, and the sweep over
//! `k` and reference-set size.
//!
//! Nominal and validation vectors are `u + noise_scale * z` with `u` a random
//! unit direction and `z` standard normal in every coordinate. A factor with
//! shift `s` draws `u + s * v + noise_scale * z`, where `v` is a random unit
//! direction orthogonal to `u` (one per factor). The factor's true success
//! rate is `link(s)`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{save_embedding_set, EmbeddingError, EmbeddingSet, EmbeddingVector};
use crate::evaluation::{evaluate_predictions, MetricError};
use crate::manifest::{Manifest, ManifestError, ManifestSets};
use crate::predictor::{predict_sets, PredictError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ABLATION_HEADER: &str = "k,reference_size,spearman_rho,avg_prediction_error";

// rng streams; factor i uses FACTOR_STREAM + i
const BASE_STREAM: u64 = 0;
const NOMINAL_STREAM: u64 = 1;
const VALIDATION_STREAM: u64 = 2;
const FACTOR_STREAM: u64 = 16;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("invalid ablation grid: {0}")]
    InvalidGrid(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Maps shift magnitude to true success rate; `link(0) == r_nom`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum Link {
    /// `r_nom * exp(-rate * shift)`
    Exponential { rate: f64 },
    /// `r_nom * max(0, 1 - slope * shift)`
    Linear { slope: f64 },
}

impl Default for Link {
    fn default() -> Self {
        Self::Exponential { rate: 1.0 }
    }
}

impl Link {
    pub fn success(&self, r_nom: f64, shift: f64) -> f64 {
        match *self {
            Self::Exponential { rate } => r_nom * (-rate * shift).exp(),
            Self::Linear { slope } => r_nom * (1.0 - slope * shift).max(0.0),
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        let (name, value) = match *self {
            Self::Exponential { rate } => ("rate", rate),
            Self::Linear { slope } => ("slope", slope),
        };
        if value.is_finite() && value > 0.0 {
            Ok(())
        } else {
            Err(SynthError::InvalidSpec(format!(
                "link {name} must be finite and positive, got {value}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthFactor {
    pub name: String,
    pub shift: f64,
    pub n_obs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthWorldSpec {
    pub dim: usize,
    pub n_nominal: usize,
    pub n_val: usize,
    pub factors: Vec<SynthFactor>,
    pub noise_scale: f64,
    pub seed: u64,
    pub r_nom: f64,
    #[serde(default)]
    pub link: Link,
}

impl SynthWorldSpec {
    /// Twelve factors with shifts `0, 3σ, 6σ, ...` and 100 observations each.
    pub fn twelve_factor(seed: u64) -> Self {
        let noise_scale = 0.1;
        Self {
            dim: 512,
            n_nominal: 500,
            n_val: 1000,
            factors: (0..12)
                .map(|j| SynthFactor {
                    name: format!("shift_{j:02}"),
                    shift: 3.0 * noise_scale * j as f64,
                    n_obs: 100,
                })
                .collect(),
            noise_scale,
            seed,
            r_nom: 0.65,
            link: Link::default(),
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let spec: Self =
            serde_json::from_str(&text).map_err(|e| SynthError::InvalidSpec(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.dim < 2 {
            return bad(format!("dim must be at least 2, got {}", self.dim));
        }
        if self.n_nominal == 0 || self.n_val == 0 {
            return bad("n_nominal and n_val must be positive".into());
        }
        if !(self.noise_scale.is_finite() && self.noise_scale > 0.0) {
            return bad(format!(
                "noise_scale must be finite and positive, got {}",
                self.noise_scale
            ));
        }
        if !(0.0..=1.0).contains(&self.r_nom) {
            return bad(format!("r_nom must lie in [0, 1], got {}", self.r_nom));
        }
        self.link.validate()?;
        if self.factors.is_empty() {
            return bad("at least one factor is required".into());
        }
        let mut names = std::collections::HashSet::new();
        for f in &self.factors {
            if !names.insert(f.name.as_str()) {
                return bad(format!("duplicate factor name '{}'", f.name));
            }
            if !(f.shift.is_finite() && f.shift >= 0.0) {
                return bad(format!("factor '{}': shift must be finite and non-negative", f.name));
            }
            if f.n_obs == 0 {
                return bad(format!("factor '{}': n_obs must be positive", f.name));
            }
        }
        Ok(())
    }

    pub fn ground_truth(&self) -> IndexMap<String, f64> {
        self.factors
            .iter()
            .map(|f| (f.name.clone(), self.link.success(self.r_nom, f.shift)))
            .collect()
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> SynthError {
    SynthError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

fn sample_set(
    label: &str,
    rng: &mut ChaCha8Rng,
    center: &[f64],
    noise: f64,
    n: usize,
) -> Result<EmbeddingSet, EmbeddingError> {
    let vectors = (0..n)
        .map(|_| {
            let values = center
                .iter()
                .map(|&c| (c + noise * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            EmbeddingVector::new(values)
        })
        .collect::<Result<Vec<_>, _>>()?;
    EmbeddingSet::new(label, vectors)
}

/// An in-memory world with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub sets: ManifestSets,
    pub ground_truth: IndexMap<String, f64>,
    pub r_nom: f64,
}

pub fn sample_world(spec: &SynthWorldSpec) -> Result<SynthWorld, SynthError> {
    spec.validate()?;
    let mut base = gaussian(&mut stream(spec.seed, BASE_STREAM), spec.dim);
    normalize(&mut base);

    let nominal = sample_set(
        "nominal",
        &mut stream(spec.seed, NOMINAL_STREAM),
        &base,
        spec.noise_scale,
        spec.n_nominal,
    )?;
    let validation = sample_set(
        "validation",
        &mut stream(spec.seed, VALIDATION_STREAM),
        &base,
        spec.noise_scale,
        spec.n_val,
    )?;

    let mut factors = Vec::with_capacity(spec.factors.len());
    for (i, f) in spec.factors.iter().enumerate() {
        let mut rng = stream(spec.seed, FACTOR_STREAM + i as u64);
        let mut direction = gaussian(&mut rng, spec.dim);
        let along: f64 = direction.iter().zip(&base).map(|(d, b)| d * b).sum();
        direction.iter_mut().zip(&base).for_each(|(d, b)| *d -= along * b);
        normalize(&mut direction);
        let center: Vec<f64> = base.iter().zip(&direction).map(|(b, d)| b + f.shift * d).collect();
        let set = sample_set(
            &format!("factor:{}", f.name),
            &mut rng,
            &center,
            spec.noise_scale,
            f.n_obs,
        )?;
        factors.push((f.name.clone(), set));
    }

    Ok(SynthWorld {
        sets: ManifestSets {
            nominal,
            validation,
            factors,
        },
        ground_truth: spec.ground_truth(),
        r_nom: spec.r_nom,
    })
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct GeneratedWorld {
    pub manifest: Manifest,
    pub manifest_path: PathBuf,
    pub ground_truth: IndexMap<String, f64>,
}

impl SynthWorld {
    /// Writes EMB1 files and `manifest.json` (ground truth as
    /// `measured_success`) into `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<GeneratedWorld, SynthError> {
        let factor_dir = out_dir.join("factors");
        fs::create_dir_all(&factor_dir).map_err(|e| io_error(&factor_dir, e))?;
        save_embedding_set(out_dir.join("nominal.emb"), &self.sets.nominal)?;
        save_embedding_set(out_dir.join("validation.emb"), &self.sets.validation)?;

        let mut factor_paths = IndexMap::new();
        for (i, (name, set)) in self.sets.factors.iter().enumerate() {
            let relative = PathBuf::from("factors").join(format!("{i:02}_{}.emb", file_stem(name)));
            save_embedding_set(out_dir.join(&relative), set)?;
            factor_paths.insert(name.clone(), relative);
        }

        let manifest = Manifest::new("nominal.emb", "validation.emb", factor_paths, self.r_nom)?
            .with_measured_success(self.ground_truth.clone())?
            .with_base_dir(out_dir);
        let manifest_path = out_dir.join(MANIFEST_FILE);
        fs::write(&manifest_path, manifest.to_json()).map_err(|e| io_error(&manifest_path, e))?;
        Ok(GeneratedWorld {
            manifest,
            manifest_path,
            ground_truth: self.ground_truth.clone(),
        })
    }
}

pub fn generate_world(spec: &SynthWorldSpec, out_dir: &Path) -> Result<GeneratedWorld, SynthError> {
    sample_world(spec)?.write(out_dir)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub k_values: Vec<usize>,
    pub reference_sizes: Vec<usize>,
}

impl AblationGrid {
    pub fn new(k_values: Vec<usize>, reference_sizes: Vec<usize>) -> Self {
        Self {
            k_values,
            reference_sizes,
        }
    }

    pub fn from_path(path: &Path) -> Result<Self, SynthError> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        serde_json::from_str(&text).map_err(|e| SynthError::InvalidGrid(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self, n_nominal: usize) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidGrid(m));
        if self.k_values.is_empty() || self.reference_sizes.is_empty() {
            return bad("k_values and reference_sizes must be non-empty".into());
        }
        if self.k_values.contains(&0) || self.reference_sizes.contains(&0) {
            return bad("grid values must be positive".into());
        }
        if let Some(&size) = self.reference_sizes.iter().find(|&&s| s > n_nominal) {
            return bad(format!(
                "reference size {size} exceeds the {n_nominal} nominal embeddings"
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellOutcome {
    /// `spearman_rho` is `None` when the correlation is undefined.
    Evaluated {
        spearman_rho: Option<f64>,
        avg_prediction_error: f64,
    },
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationCell {
    pub k: usize,
    pub reference_size: usize,
    pub outcome: CellOutcome,
}

impl AblationCell {
    pub fn spearman_rho(&self) -> Option<f64> {
        match self.outcome {
            CellOutcome::Evaluated { spearman_rho, .. } => spearman_rho,
            CellOutcome::Invalid(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    /// Undefined correlations are written as `undefined`, invalid cells as
    /// `invalid` in both metric columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(ABLATION_HEADER);
        out.push('\n');
        for cell in &self.cells {
            let (rho, err) = match &cell.outcome {
                CellOutcome::Evaluated {
                    spearman_rho,
                    avg_prediction_error,
                } => (
                    spearman_rho.map_or_else(|| "undefined".to_string(), |r| r.to_string()),
                    avg_prediction_error.to_string(),
                ),
                CellOutcome::Invalid(_) => ("invalid".to_string(), "invalid".to_string()),
            };
            writeln!(out, "{},{},{rho},{err}", cell.k, cell.reference_size).expect("write to string");
        }
        out
    }

    /// Median correlation over cells where it is defined.
    pub fn median_rho(&self) -> Option<f64> {
        let mut rhos: Vec<f64> = self.cells.iter().filter_map(AblationCell::spearman_rho).collect();
        if rhos.is_empty() {
            return None;
        }
        rhos.sort_by(f64::total_cmp);
        let mid = rhos.len() / 2;
        Some(if rhos.len() % 2 == 1 {
            rhos[mid]
        } else {
            (rhos[mid - 1] + rhos[mid]) / 2.0
        })
    }
}

/// Seeded subsample of `size` distinct nominal indices, in ascending order.
pub fn reference_subset(n_nominal: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut rng = stream(seed, size as u64);
    let mut indices = sample(&mut rng, n_nominal, size).into_vec();
    indices.sort_unstable();
    indices
}

/// One predict-and-evaluate cycle per grid cell, rows ordered by reference
/// size then `k`. Subsets depend only on `(seed, size)`, so every `k` at a
/// given size sees the same reference set.
pub fn run_ablation(
    sets: &ManifestSets,
    measured: &IndexMap<String, f64>,
    r_nom: f64,
    grid: &AblationGrid,
    seed: u64,
    source: crate::manifest::ObservationSource,
) -> Result<AblationTable, SynthError> {
    let n_nominal = sets.nominal.len();
    grid.validate(n_nominal)?;
    let mut cells = Vec::with_capacity(grid.k_values.len() * grid.reference_sizes.len());
    for &size in &grid.reference_sizes {
        let indices = reference_subset(n_nominal, size, seed);
        let reference = sets.nominal.select("nominal", &indices)?;
        for &k in &grid.k_values {
            let outcome = if k > size {
                CellOutcome::Invalid(format!("k = {k} exceeds reference size {size}"))
            } else {
                let report = predict_sets(&reference, &sets.validation, &sets.factors, k, r_nom, source)?;
                let evaluation = evaluate_predictions(&report.predictions, measured)?;
                CellOutcome::Evaluated {
                    spearman_rho: evaluation.spearman_rho,
                    avg_prediction_error: evaluation.avg_prediction_error,
                }
            };
            log::info!("ablation cell k={k} |S_nom|={size}: {outcome:?}");
            cells.push(AblationCell {
                k,
                reference_size: size,
                outcome,
            });
        }
    }
    Ok(AblationTable { cells })
}

/// [`run_ablation`] over a manifest that carries `measured_success`.
pub fn run_ablation_manifest(manifest: &Manifest, grid: &AblationGrid, seed: u64) -> Result<AblationTable, SynthError> {
    let measured = manifest
        .measured_success
        .as_ref()
        .ok_or_else(|| SynthError::InvalidGrid("manifest has no measured_success to evaluate against".into()))?;
    let sets = manifest.load_sets()?;
    run_ablation(&sets, measured, manifest.r_nom, grid, seed, manifest.source)
}
