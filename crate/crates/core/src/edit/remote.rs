//! HTTP clients for remote edit and critic services.

use std::time::Duration;

use log::debug;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::protocol::{CritiqueRequest, CritiqueResponse, EditRequest, EditResponse};
use super::service::{CriticService, EditService, ServiceError};

const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Debug, Clone)]
struct JsonEndpoint {
    client: Client,
    url: String,
}

impl JsonEndpoint {
    fn new(base_url: &str, path: &str, timeout: Duration) -> Result<Self, ServiceError> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ServiceError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{}/{path}", base_url.trim_end_matches('/')),
        })
    }

    fn post<Req: Serialize, Resp: DeserializeOwned>(&self, body: &Req) -> Result<Resp, ServiceError> {
        let response = self
            .client
            .post(&self.url)
            .json(body)
            .send()
            .map_err(|e| ServiceError::Transport(format!("{}: {e}", self.url)))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| ServiceError::Transport(format!("{}: {e}", self.url)))?;
        debug!("POST {} -> {status} ({} bytes)", self.url, text.len());
        if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
            return Err(ServiceError::Transport(format!("{}: HTTP {status}", self.url)));
        }
        if !status.is_success() {
            return Err(ServiceError::Malformed(format!("{}: HTTP {status}", self.url)));
        }
        serde_json::from_str(&text).map_err(|e| ServiceError::Malformed(format!("{}: {e}", self.url)))
    }
}

#[derive(Debug, Clone)]
pub struct RemoteEditor(JsonEndpoint);

impl RemoteEditor {
    pub fn new(base_url: &str) -> Result<Self, ServiceError> {
        Self::with_timeout(base_url, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Result<Self, ServiceError> {
        JsonEndpoint::new(base_url, "edit", timeout).map(Self)
    }
}

impl EditService for RemoteEditor {
    fn edit(&self, request: &EditRequest) -> Result<EditResponse, ServiceError> {
        self.0.post(request)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteCritic(JsonEndpoint);

impl RemoteCritic {
    pub fn new(base_url: &str) -> Result<Self, ServiceError> {
        Self::with_timeout(base_url, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Result<Self, ServiceError> {
        JsonEndpoint::new(base_url, "critique", timeout).map(Self)
    }
}

impl CriticService for RemoteCritic {
    fn critique(&self, request: &CritiqueRequest) -> Result<CritiqueResponse, ServiceError> {
        self.0.post(request)
    }
}
