//! Chat-completion backends: an Ollama-compatible HTTP client and a
//! scripted mock for offline runs.

mod http;
mod mock;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::persona::AgentRole;

pub use http::{HttpBackend, HttpConfig, BASE_URL_ENV};
pub use mock::{LoggedRequest, MockBackend, MockDefault, MockRule, MockScript, SyntheticCoder};

/// Where a request sits in an experiment. Not sent over the wire; used for
/// mock matching and logging.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RequestTag {
    pub config_id: String,
    pub segment_id: usize,
    pub round: u32,
    pub agent: String,
    pub role: Option<AgentRole>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub tag: RequestTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub latency: Duration,
    pub backend: BackendKind,
    /// Wall-clock receive time in Unix milliseconds; 0 for the mock.
    pub received_at_ms: u64,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request timed out after {secs} s ({attempts} attempt(s))")]
    Timeout { secs: u64, attempts: u32 },
    #[error("model {model:?} not available at {endpoint}; pull it (e.g. `ollama pull {model}`) or fix model_id")]
    ModelUnavailable { model: String, endpoint: String },
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Confirms `model_id` is served.
    fn probe(&self, model_id: &str) -> Result<(), BackendError>;

    fn kind(&self) -> BackendKind;
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }

    fn probe(&self, model_id: &str) -> Result<(), BackendError> {
        (**self).probe(model_id)
    }

    fn kind(&self) -> BackendKind {
        (**self).kind()
    }
}
