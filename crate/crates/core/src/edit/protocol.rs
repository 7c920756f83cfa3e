//! JSON wire types for the edit (`POST /edit`) and critique
//! (`POST /critique`) services. Image payloads travel as standard base64.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Raw image bytes plus their media type. Never decoded except for zooming.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub bytes: Vec<u8>,
    pub media_type: String,
}

impl ImagePayload {
    pub fn new(bytes: Vec<u8>, media_type: impl Into<String>) -> Self {
        Self {
            bytes,
            media_type: media_type.into(),
        }
    }

    pub fn to_base64(&self) -> String {
        STANDARD.encode(&self.bytes)
    }

    pub fn extension(&self) -> &'static str {
        media_type_extension(&self.media_type)
    }
}

pub fn media_type_extension(media_type: &str) -> &'static str {
    match media_type {
        "image/png" => "png",
        "image/jpeg" | "image/jpg" => "jpg",
        "image/webp" => "webp",
        _ => "bin",
    }
}

pub fn media_type_for_extension(ext: &str) -> &'static str {
    match ext.to_ascii_lowercase().as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "webp" => "image/webp",
        _ => "application/octet-stream",
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("invalid base64 in {field}: {message}")]
    Base64 { field: String, message: String },
    #[error("expected {expected} candidates, got {actual}")]
    CandidateCount { expected: usize, actual: usize },
    #[error("critic accepted without choosing a candidate")]
    AcceptWithoutIndex,
    #[error("critic rejected but still named candidate {0}")]
    RejectWithIndex(u32),
    #[error("critic chose candidate {index} of {count}")]
    IndexOutOfRange { index: u32, count: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRequest {
    pub image: String,
    pub media_type: String,
    pub prompt: String,
    pub n_variants: u32,
}

impl EditRequest {
    pub fn new(image: &ImagePayload, prompt: &str, n_variants: u32) -> Self {
        Self {
            image: image.to_base64(),
            media_type: image.media_type.clone(),
            prompt: prompt.to_string(),
            n_variants,
        }
    }

    pub fn decode_image(&self) -> Result<ImagePayload, ProtocolError> {
        Ok(ImagePayload::new(
            decode("image", &self.image)?,
            self.media_type.clone(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditResponse {
    pub candidates: Vec<String>,
}

impl EditResponse {
    /// Decodes candidates, requiring exactly `expected` of them.
    pub fn decode(&self, expected: usize, media_type: &str) -> Result<Vec<ImagePayload>, ProtocolError> {
        if self.candidates.len() != expected {
            return Err(ProtocolError::CandidateCount {
                expected,
                actual: self.candidates.len(),
            });
        }
        self.candidates
            .iter()
            .enumerate()
            .map(|(i, c)| Ok(ImagePayload::new(decode(&format!("candidates[{i}]"), c)?, media_type)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CritiqueRequest {
    pub original: String,
    pub candidates: Vec<String>,
    pub instruction: String,
    pub prompt_template: String,
}

impl CritiqueRequest {
    pub fn new(original: &ImagePayload, candidates: &[ImagePayload], instruction: &str, prompt_template: &str) -> Self {
        Self {
            original: original.to_base64(),
            candidates: candidates.iter().map(ImagePayload::to_base64).collect(),
            instruction: instruction.to_string(),
            prompt_template: prompt_template.to_string(),
        }
    }

    pub fn decode_candidates(&self) -> Result<Vec<Vec<u8>>, ProtocolError> {
        self.candidates
            .iter()
            .enumerate()
            .map(|(i, c)| decode(&format!("candidates[{i}]"), c))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CritiqueResponse {
    pub accept: bool,
    pub best_index: Option<u32>,
    pub reasoning: String,
}

/// A validated critic decision.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CritiqueVerdict {
    pub accept: bool,
    pub best_index: Option<usize>,
    pub reasoning: String,
}

impl CritiqueResponse {
    /// Checks the accept/index pairing against the number of candidates sent.
    pub fn verdict(&self, n_candidates: usize) -> Result<CritiqueVerdict, ProtocolError> {
        let best_index = match (self.accept, self.best_index) {
            (true, None) => return Err(ProtocolError::AcceptWithoutIndex),
            (false, Some(i)) => return Err(ProtocolError::RejectWithIndex(i)),
            (true, Some(i)) if i as usize >= n_candidates => {
                return Err(ProtocolError::IndexOutOfRange {
                    index: i,
                    count: n_candidates,
                })
            }
            (_, index) => index.map(|i| i as usize),
        };
        Ok(CritiqueVerdict {
            accept: self.accept,
            best_index,
            reasoning: self.reasoning.clone(),
        })
    }
}

fn decode(field: &str, text: &str) -> Result<Vec<u8>, ProtocolError> {
    STANDARD.decode(text).map_err(|e| ProtocolError::Base64 {
        field: field.to_string(),
        message: e.to_string(),
    })
}
