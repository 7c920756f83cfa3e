//! Generation of edited observation sets for environmental factors.
//!
//! Each nominal observation is sent to an image-editing service, which
//! returns a batch of candidate edits; a vision-language critic either picks
//! the best candidate or rejects them all. Services are reached over HTTP
//! (see [`remote`]) or replaced by deterministic in-process mocks
//! (see [`mock`]).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub mod mock;
pub mod pipeline;
pub mod prompts;
pub mod protocol;
pub mod remote;
pub mod service;
pub mod zoom;

pub use pipeline::{
    build_factor_batch, read_observation_dir, run_edit_job, BatchConfig, BatchSummary, ChosenEdit, EditError, EditJob,
    FactorEditBatch, JobFailure, JobSettings, Observation, RetainedImage,
};
pub use prompts::{render_prompt, PromptError, TemplateLibrary};
pub use protocol::{CritiqueRequest, CritiqueResponse, CritiqueVerdict, EditRequest, EditResponse, ImagePayload};
pub use service::{CriticService, EditService, RetryPolicy, ServiceError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Camera {
    Overhead,
    Wrist,
}

impl Camera {
    pub const ALL: [Camera; 2] = [Camera::Overhead, Camera::Wrist];
}

impl fmt::Display for Camera {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Overhead => "overhead",
            Self::Wrist => "wrist",
        })
    }
}

impl FromStr for Camera {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "overhead" => Ok(Self::Overhead),
            "wrist" => Ok(Self::Wrist),
            other => Err(format!("unknown camera '{other}'")),
        }
    }
}

pub type Backends = (Box<dyn EditService>, Box<dyn CriticService>);

/// Edit and critic backends for an endpoint pair; `mock:` URLs select the
/// in-process mocks seeded by `seed`.
pub fn backends(editor_url: &str, critic_url: &str, seed: u64) -> Result<Backends, String> {
    let editor: Box<dyn EditService> = match mock::MockOptions::parse(editor_url) {
        Some(options) => Box::new(options?.editor(seed)),
        None => Box::new(remote::RemoteEditor::new(editor_url).map_err(|e| e.to_string())?),
    };
    let critic: Box<dyn CriticService> = match mock::MockOptions::parse(critic_url) {
        Some(options) => Box::new(options?.critic()),
        None => Box::new(remote::RemoteCritic::new(critic_url).map_err(|e| e.to_string())?),
    };
    Ok((editor, critic))
}
