//! Deterministic in-process edit and critic backends.
//!
//! The mock editor returns the original image bytes followed by a trailer
//! that marks whether the candidate is "faithful" to the prompt. Image
//! decoders stop at the end of the encoded stream, so candidates stay
//! decodable. Which candidate (if any) is faithful is a pure function of the
//! run seed, the prompt and the original bytes. The mock critic reads the
//! trailers back.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::protocol::{CritiqueRequest, CritiqueResponse, EditRequest, EditResponse, ImagePayload};
use super::service::{CriticService, EditService, ServiceError};

const TRAILER_MAGIC: &[u8; 8] = b"MOCKEDIT";
const TRAILER_LEN: usize = TRAILER_MAGIC.len() + 2 + 8;

fn digest(seed: u64, tag: &str, parts: &[&[u8]]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hasher.finalize().into()
}

/// Uniform in `[0, 1)` from the first 8 bytes of a digest.
fn unit_interval(d: &[u8; 32]) -> f64 {
    let word = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (word >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockEditor {
    pub seed: u64,
    /// Probability that a request yields one faithful candidate.
    pub accept_rate: f64,
    /// Fixed faithful slot; otherwise chosen by hash.
    pub faithful_index: Option<usize>,
}

impl MockEditor {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            accept_rate: 1.0,
            faithful_index: None,
        }
    }

    pub fn with_accept_rate(mut self, rate: f64) -> Self {
        self.accept_rate = rate;
        self
    }

    pub fn with_faithful_index(mut self, index: usize) -> Self {
        self.faithful_index = Some(index);
        self
    }

    /// The faithful slot this editor will produce for a request, if any.
    pub fn faithful_slot(&self, image: &[u8], prompt: &str, n_variants: usize) -> Option<usize> {
        let draw = digest(self.seed, "accept", &[image, prompt.as_bytes()]);
        if unit_interval(&draw) >= self.accept_rate || n_variants == 0 {
            return None;
        }
        match self.faithful_index {
            Some(i) if i < n_variants => Some(i),
            Some(_) => None,
            None => {
                let slot = digest(self.seed, "slot", &[image, prompt.as_bytes()]);
                Some(u64::from_le_bytes(slot[..8].try_into().expect("8 bytes")) as usize % n_variants)
            }
        }
    }
}

impl EditService for MockEditor {
    fn edit(&self, request: &EditRequest) -> Result<EditResponse, ServiceError> {
        let image = request
            .decode_image()
            .map_err(|e| ServiceError::Malformed(e.to_string()))?;
        let n = request.n_variants as usize;
        let faithful = self.faithful_slot(&image.bytes, &request.prompt, n);
        let candidates = (0..n)
            .map(|i| {
                let mut bytes = image.bytes.clone();
                bytes.extend_from_slice(TRAILER_MAGIC);
                bytes.push(u8::from(faithful == Some(i)));
                bytes.push(i as u8);
                let tag = digest(
                    self.seed,
                    "candidate",
                    &[&image.bytes, request.prompt.as_bytes(), &[i as u8]],
                );
                bytes.extend_from_slice(&tag[..8]);
                ImagePayload::new(bytes, image.media_type.clone()).to_base64()
            })
            .collect();
        Ok(EditResponse { candidates })
    }
}

/// True when `bytes` carries a mock trailer marking a faithful edit.
pub fn is_faithful_candidate(bytes: &[u8]) -> bool {
    bytes.len() >= TRAILER_LEN && {
        let trailer = &bytes[bytes.len() - TRAILER_LEN..];
        &trailer[..TRAILER_MAGIC.len()] == TRAILER_MAGIC && trailer[TRAILER_MAGIC.len()] == 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MockCriticPolicy {
    /// Accept the first faithful candidate, reject when there is none.
    #[default]
    Faithful,
    RejectAll,
    AcceptFirst,
    /// Answer `accept: true` without an index.
    Malformed,
}

impl FromStr for MockCriticPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "faithful" => Ok(Self::Faithful),
            "reject_all" => Ok(Self::RejectAll),
            "accept_first" => Ok(Self::AcceptFirst),
            "malformed" => Ok(Self::Malformed),
            other => Err(format!("unknown mock critic policy '{other}'")),
        }
    }
}

impl fmt::Display for MockCriticPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Faithful => "faithful",
            Self::RejectAll => "reject_all",
            Self::AcceptFirst => "accept_first",
            Self::Malformed => "malformed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MockCritic {
    pub policy: MockCriticPolicy,
}

impl MockCritic {
    pub fn new(policy: MockCriticPolicy) -> Self {
        Self { policy }
    }
}

impl CriticService for MockCritic {
    fn critique(&self, request: &CritiqueRequest) -> Result<CritiqueResponse, ServiceError> {
        let candidates = request
            .decode_candidates()
            .map_err(|e| ServiceError::Malformed(e.to_string()))?;
        let response = match self.policy {
            MockCriticPolicy::RejectAll => CritiqueResponse {
                accept: false,
                best_index: None,
                reasoning: "mock: rejecting every candidate".into(),
            },
            MockCriticPolicy::AcceptFirst => CritiqueResponse {
                accept: !candidates.is_empty(),
                best_index: (!candidates.is_empty()).then_some(0),
                reasoning: "mock: accepting the first candidate".into(),
            },
            MockCriticPolicy::Malformed => CritiqueResponse {
                accept: true,
                best_index: None,
                reasoning: "mock: malformed verdict".into(),
            },
            MockCriticPolicy::Faithful => match candidates.iter().position(|c| is_faithful_candidate(c)) {
                Some(i) => CritiqueResponse {
                    accept: true,
                    best_index: Some(i as u32),
                    reasoning: format!("mock: candidate {i} reflects \"{}\"", request.instruction),
                },
                None => CritiqueResponse {
                    accept: false,
                    best_index: None,
                    reasoning: format!("mock: no candidate reflects \"{}\"", request.instruction),
                },
            },
        };
        Ok(response)
    }
}

/// Options parsed from a `mock:key=value&key=value` endpoint URL.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MockOptions {
    pub accept_rate: Option<f64>,
    pub faithful_index: Option<usize>,
    pub policy: Option<MockCriticPolicy>,
}

impl MockOptions {
    /// `None` when `url` does not use the `mock:` scheme.
    pub fn parse(url: &str) -> Option<Result<Self, String>> {
        let rest = url.strip_prefix("mock:")?;
        Some(Self::parse_query(rest.trim_start_matches('?')))
    }

    fn parse_query(query: &str) -> Result<Self, String> {
        let mut options = Self::default();
        for pair in query.split(['&', ',']).filter(|p| !p.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| format!("expected key=value in mock options, got '{pair}'"))?;
            match key {
                "accept_rate" => {
                    let rate: f64 = value.parse().map_err(|e| format!("accept_rate: {e}"))?;
                    if !(0.0..=1.0).contains(&rate) {
                        return Err(format!("accept_rate {rate} outside [0, 1]"));
                    }
                    options.accept_rate = Some(rate);
                }
                "faithful_index" => {
                    options.faithful_index = Some(value.parse().map_err(|e| format!("faithful_index: {e}"))?)
                }
                "policy" => options.policy = Some(value.parse()?),
                other => return Err(format!("unknown mock option '{other}'")),
            }
        }
        Ok(options)
    }

    pub fn editor(&self, seed: u64) -> MockEditor {
        MockEditor {
            seed,
            accept_rate: self.accept_rate.unwrap_or(1.0),
            faithful_index: self.faithful_index,
        }
    }

    pub fn critic(&self) -> MockCritic {
        MockCritic::new(self.policy.unwrap_or_default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(bytes: &[u8], n: u32) -> EditRequest {
        EditRequest::new(&ImagePayload::new(bytes.to_vec(), "image/png"), "make it blue", n)
    }

    #[test]
    fn fixed_faithful_slot_is_chosen() {
        let editor = MockEditor::new(7).with_faithful_index(2);
        let resp = editor.edit(&request(b"img", 4)).unwrap();
        let decoded = resp.decode(4, "image/png").unwrap();
        let flags: Vec<bool> = decoded.iter().map(|c| is_faithful_candidate(&c.bytes)).collect();
        assert_eq!(flags, [false, false, true, false]);
        assert!(decoded.iter().all(|c| c.bytes.starts_with(b"img")));

        let critic = MockCritic::default();
        let verdict = critic
            .critique(&CritiqueRequest::new(
                &ImagePayload::new(b"img".to_vec(), "image/png"),
                &decoded,
                "blue",
                "t",
            ))
            .unwrap();
        assert_eq!(verdict.best_index, Some(2));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = MockEditor::new(1).with_accept_rate(0.5);
        let b = MockEditor::new(1).with_accept_rate(0.5);
        for i in 0..20u8 {
            assert_eq!(a.edit(&request(&[i], 4)).unwrap(), b.edit(&request(&[i], 4)).unwrap());
        }
        let slots_1: Vec<_> = (0..50u8).map(|i| a.faithful_slot(&[i], "p", 4)).collect();
        let slots_2: Vec<_> = (0..50u8)
            .map(|i| MockEditor::new(2).with_accept_rate(0.5).faithful_slot(&[i], "p", 4))
            .collect();
        assert_ne!(slots_1, slots_2);
    }

    #[test]
    fn zero_rate_never_faithful() {
        let editor = MockEditor::new(3).with_accept_rate(0.0);
        assert!((0..100u8).all(|i| editor.faithful_slot(&[i], "p", 4).is_none()));
    }

    #[test]
    fn parses_mock_urls() {
        assert_eq!(MockOptions::parse("http://x"), None);
        let opts = MockOptions::parse("mock:accept_rate=0.85&policy=reject_all")
            .unwrap()
            .unwrap();
        assert_eq!(opts.accept_rate, Some(0.85));
        assert_eq!(opts.policy, Some(MockCriticPolicy::RejectAll));
        assert_eq!(MockOptions::parse("mock:").unwrap().unwrap(), MockOptions::default());
        assert!(MockOptions::parse("mock:accept_rate=2").unwrap().is_err());
        assert!(MockOptions::parse("mock:bogus=1").unwrap().is_err());
    }
}
