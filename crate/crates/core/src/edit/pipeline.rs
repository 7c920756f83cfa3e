//! Per-factor edit batches: fan each observation out to the editor, let the
//! critic accept-and-choose or reject, and keep observations whose every
//! camera view was accepted.

use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::protocol::{media_type_for_extension, CritiqueRequest, EditRequest, ImagePayload};
use super::service::{CriticService, EditService, RetryPolicy, ServiceError};
use super::zoom::{zoom, CropRect};
use super::Camera;

pub const DEFAULT_VARIANTS: usize = 4;
/// Retained sets smaller than this get a warning.
pub const SMALL_BATCH: usize = 30;
pub const SUMMARY_FILE: &str = "batch.json";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Error)]
pub enum EditError {
    #[error("edit job for '{0}' has an empty prompt or instruction")]
    EmptyPrompt(String),
    #[error("n_variants must be at least 1")]
    NoVariants,
    #[error("max_in_flight must be at least 1")]
    NoParallelism,
    #[error("cannot build worker pool: {0}")]
    Pool(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("observation '{0}' has no images")]
    NoImages(String),
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> EditError {
    EditError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// One camera view of one observation, to be edited toward one factor.
#[derive(Debug, Clone, PartialEq)]
pub struct EditJob {
    pub observation_id: String,
    pub camera: Camera,
    pub image: ImagePayload,
    pub factor: String,
    pub full_prompt: String,
    pub short_instruction: String,
    pub n_variants: usize,
}

impl EditJob {
    fn validate(&self) -> Result<(), EditError> {
        if self.full_prompt.trim().is_empty() || self.short_instruction.trim().is_empty() {
            return Err(EditError::EmptyPrompt(self.observation_id.clone()));
        }
        if self.n_variants == 0 {
            return Err(EditError::NoVariants);
        }
        Ok(())
    }
}

/// The critic's pick for a job.
#[derive(Debug, Clone, PartialEq)]
pub struct ChosenEdit {
    pub candidate_index: usize,
    pub image: ImagePayload,
    pub reasoning: String,
}

/// Why a job produced no verdict. Distinct from a critic rejection.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum JobFailure {
    #[error("edit service: {0}")]
    Editor(ServiceError),
    #[error("critic service: {0}")]
    Critic(ServiceError),
    #[error("malformed edit response: {0}")]
    MalformedEdit(String),
    #[error("malformed critic response: {0}")]
    MalformedCritique(String),
    #[error("zoom: {0}")]
    Zoom(String),
}

#[derive(Debug, Clone)]
pub struct JobSettings<'a> {
    pub critic_template: &'a str,
    pub retry: RetryPolicy,
    pub zoom: Option<CropRect>,
}

/// Runs one edit job. `Ok(None)` means the critic rejected every candidate.
pub fn run_edit_job(
    job: &EditJob,
    editor: &dyn EditService,
    critic: &dyn CriticService,
    settings: &JobSettings<'_>,
) -> Result<Option<ChosenEdit>, JobFailure> {
    let tag = format!("{}/{}", job.observation_id, job.camera);
    let edit_request = EditRequest::new(&job.image, &job.full_prompt, job.n_variants as u32);
    debug!(
        "[{tag}] edit request: {} bytes, {} variants, factor '{}'",
        job.image.bytes.len(),
        job.n_variants,
        job.factor
    );
    let edit_response = settings
        .retry
        .run(&format!("edit {tag}"), || editor.edit(&edit_request))
        .map_err(JobFailure::Editor)?;
    let candidates = edit_response
        .decode(job.n_variants, &job.image.media_type)
        .map_err(|e| JobFailure::MalformedEdit(e.to_string()))?;
    debug!("[{tag}] edit response: {} candidates", candidates.len());

    let critique_request = CritiqueRequest::new(
        &job.image,
        &candidates,
        &job.short_instruction,
        settings.critic_template,
    );
    let critique = settings
        .retry
        .run(&format!("critique {tag}"), || critic.critique(&critique_request))
        .map_err(JobFailure::Critic)?;
    debug!(
        "[{tag}] critique response: accept={} best_index={:?} reasoning={:?}",
        critique.accept, critique.best_index, critique.reasoning
    );
    let verdict = critique
        .verdict(candidates.len())
        .map_err(|e| JobFailure::MalformedCritique(e.to_string()))?;

    let Some(index) = verdict.best_index else {
        return Ok(None);
    };
    let mut image = candidates[index].clone();
    if let Some(rect) = settings.zoom {
        image = zoom(&image, rect).map_err(|e| JobFailure::Zoom(e.to_string()))?;
    }
    Ok(Some(ChosenEdit {
        candidate_index: index,
        image,
        reasoning: verdict.reasoning,
    }))
}

/// A nominal observation: one image per camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub id: String,
    pub images: Vec<(Camera, ImagePayload)>,
}

/// Prompts and knobs for one factor.
#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub overhead_prompt: String,
    pub wrist_prompt: String,
    pub short_instruction: String,
    pub critic_template: String,
    pub n_variants: usize,
    pub zoom: Option<CropRect>,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
}

impl BatchConfig {
    pub fn prompt_for(&self, camera: Camera) -> &str {
        match camera {
            Camera::Overhead => &self.overhead_prompt,
            Camera::Wrist => &self.wrist_prompt,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetainedImage {
    pub observation_id: String,
    pub camera: Camera,
    pub candidate_index: usize,
    pub image: ImagePayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedObservation {
    pub observation_id: String,
    pub camera: Camera,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorEditBatch {
    pub factor: String,
    /// Every camera view of every retained observation, in input order.
    pub retained: Vec<RetainedImage>,
    pub discarded: Vec<String>,
    pub failed: Vec<FailedObservation>,
    pub retention_rate: f64,
    pub warnings: Vec<String>,
}

impl FactorEditBatch {
    pub fn discarded_count(&self) -> usize {
        self.discarded.len()
    }

    pub fn failed_count(&self) -> usize {
        let mut ids: Vec<&str> = self.failed.iter().map(|f| f.observation_id.as_str()).collect();
        ids.dedup();
        ids.len()
    }

    pub fn retained_observations(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.retained.iter().map(|r| r.observation_id.as_str()).collect();
        ids.dedup();
        ids
    }
}

enum ObservationOutcome {
    Retained(Vec<RetainedImage>),
    Discarded,
    Failed(Vec<FailedObservation>),
}

/// Edits every camera view of every observation toward `factor`.
///
/// An observation is retained only if the critic accepted all of its views.
/// Any rejection discards it; otherwise any failed view marks it failed.
/// Failed observations count toward neither retention nor discards.
pub fn build_factor_batch(
    observations: &[Observation],
    factor: &str,
    config: &BatchConfig,
    editor: &dyn EditService,
    critic: &dyn CriticService,
) -> Result<FactorEditBatch, EditError> {
    if config.max_in_flight == 0 {
        return Err(EditError::NoParallelism);
    }
    let mut jobs = Vec::new();
    for obs in observations {
        if obs.images.is_empty() {
            return Err(EditError::NoImages(obs.id.clone()));
        }
        for (camera, image) in &obs.images {
            let job = EditJob {
                observation_id: obs.id.clone(),
                camera: *camera,
                image: image.clone(),
                factor: factor.to_string(),
                full_prompt: config.prompt_for(*camera).to_string(),
                short_instruction: config.short_instruction.clone(),
                n_variants: config.n_variants,
            };
            job.validate()?;
            jobs.push(job);
        }
    }

    let settings = JobSettings {
        critic_template: &config.critic_template,
        retry: config.retry,
        zoom: config.zoom,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.max_in_flight)
        .build()
        .map_err(|e| EditError::Pool(e.to_string()))?;
    let results: Vec<Result<Option<ChosenEdit>, JobFailure>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| run_edit_job(job, editor, critic, &settings))
            .collect()
    });

    let mut outcomes = Vec::with_capacity(observations.len());
    let mut cursor = 0;
    for obs in observations {
        let views = &results[cursor..cursor + obs.images.len()];
        let view_jobs = &jobs[cursor..cursor + obs.images.len()];
        cursor += obs.images.len();

        let outcome = if views.iter().any(|r| matches!(r, Ok(None))) {
            ObservationOutcome::Discarded
        } else if views.iter().any(Result::is_err) {
            ObservationOutcome::Failed(
                views
                    .iter()
                    .zip(view_jobs)
                    .filter_map(|(r, job)| {
                        r.as_ref().err().map(|e| FailedObservation {
                            observation_id: job.observation_id.clone(),
                            camera: job.camera,
                            reason: e.to_string(),
                        })
                    })
                    .collect(),
            )
        } else {
            ObservationOutcome::Retained(
                views
                    .iter()
                    .zip(view_jobs)
                    .map(|(r, job)| {
                        let chosen = r.as_ref().ok().and_then(Option::as_ref).expect("accepted view");
                        RetainedImage {
                            observation_id: job.observation_id.clone(),
                            camera: job.camera,
                            candidate_index: chosen.candidate_index,
                            image: chosen.image.clone(),
                        }
                    })
                    .collect(),
            )
        };
        outcomes.push((obs.id.clone(), outcome));
    }

    let mut retained = Vec::new();
    let mut discarded = Vec::new();
    let mut failed = Vec::new();
    let mut retained_obs = 0usize;
    for (id, outcome) in outcomes {
        match outcome {
            ObservationOutcome::Retained(images) => {
                retained_obs += 1;
                retained.extend(images);
            }
            ObservationOutcome::Discarded => discarded.push(id),
            ObservationOutcome::Failed(f) => failed.extend(f),
        }
    }
    let judged = retained_obs + discarded.len();
    let retention_rate = if judged == 0 {
        0.0
    } else {
        retained_obs as f64 / judged as f64
    };

    let mut warnings = Vec::new();
    if retained_obs < SMALL_BATCH {
        let message = format!("factor '{factor}': only {retained_obs} observations retained (< {SMALL_BATCH})");
        warn!("{message}");
        warnings.push(message);
    }
    let batch = FactorEditBatch {
        factor: factor.to_string(),
        retained,
        discarded,
        failed,
        retention_rate,
        warnings,
    };
    info!(
        "factor '{factor}': {retained_obs} retained, {} discarded, {} failed",
        batch.discarded_count(),
        batch.failed_count()
    );
    Ok(batch)
}

/// Filesystem-safe form of an observation id.
pub fn sanitize_id(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedRecord {
    pub observation_id: String,
    pub camera: Camera,
    pub candidate_index: usize,
    pub media_type: String,
    pub file: String,
}

/// Contents of `batch.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub factor: String,
    pub retained: Vec<RetainedRecord>,
    pub discarded: Vec<String>,
    pub failed: Vec<FailedObservation>,
    pub retained_count: usize,
    pub discarded_count: usize,
    pub failed_count: usize,
    pub retention_rate: f64,
    pub warnings: Vec<String>,
}

impl FactorEditBatch {
    pub fn summary(&self) -> BatchSummary {
        BatchSummary {
            factor: self.factor.clone(),
            retained: self
                .retained
                .iter()
                .map(|r| RetainedRecord {
                    observation_id: r.observation_id.clone(),
                    camera: r.camera,
                    candidate_index: r.candidate_index,
                    media_type: r.image.media_type.clone(),
                    file: format!(
                        "{IMAGE_DIR}/{}__{}.{}",
                        sanitize_id(&r.observation_id),
                        r.camera,
                        r.image.extension()
                    ),
                })
                .collect(),
            discarded: self.discarded.clone(),
            failed: self.failed.clone(),
            retained_count: self.retained_observations().len(),
            discarded_count: self.discarded_count(),
            failed_count: self.failed_count(),
            retention_rate: self.retention_rate,
            warnings: self.warnings.clone(),
        }
    }

    /// Writes `batch.json` and `images/<id>__<camera>.<ext>` under `dir`,
    /// replacing any previous batch there.
    pub fn write_dir(&self, dir: &Path) -> Result<(), EditError> {
        let images = dir.join(IMAGE_DIR);
        if images.exists() {
            fs::remove_dir_all(&images).map_err(|e| io_error(&images, e))?;
        }
        fs::create_dir_all(&images).map_err(|e| io_error(&images, e))?;
        let summary = self.summary();
        for (record, image) in summary.retained.iter().zip(&self.retained) {
            let path = dir.join(&record.file);
            fs::write(&path, &image.image.bytes).map_err(|e| io_error(&path, e))?;
        }
        let path = dir.join(SUMMARY_FILE);
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
        fs::write(&path, json).map_err(|e| io_error(&path, e))
    }
}

/// Reads observations from files named `<id>__<camera>.<ext>`.
///
/// Observations are ordered by id; views within one by camera.
pub fn read_observation_dir(dir: &Path) -> Result<Vec<Observation>, EditError> {
    let entries = fs::read_dir(dir).map_err(|e| io_error(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| io_error(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let (Some(stem), Some(ext)) = (
            path.file_stem().and_then(|s| s.to_str()),
            path.extension().and_then(|s| s.to_str()),
        ) else {
            continue;
        };
        let Some((id, camera)) = stem.rsplit_once("__") else {
            continue;
        };
        let Ok(camera) = camera.parse::<Camera>() else {
            continue;
        };
        files.push((id.to_string(), camera, media_type_for_extension(ext), path.clone()));
    }
    files.sort_by(|a, b| (&a.0, a.1).cmp(&(&b.0, b.1)));

    let mut observations: Vec<Observation> = Vec::new();
    for (id, camera, media_type, path) in files {
        let bytes = fs::read(&path).map_err(|e| io_error(&path, e))?;
        let payload = ImagePayload::new(bytes, media_type);
        match observations.last_mut() {
            Some(last) if last.id == id => last.images.push((camera, payload)),
            _ => observations.push(Observation {
                id,
                images: vec![(camera, payload)],
            }),
        }
    }
    Ok(observations)
}
