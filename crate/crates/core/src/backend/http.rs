use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{BackendError, BackendKind, ChatBackend, ChatRequest, ChatResponse};

/// Overrides the endpoint from the config file.
pub const BASE_URL_ENV: &str = "CODER_CONSENSUS_BASE_URL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub base_url: String,
    pub timeout: Duration,
    /// Extra attempts after the first transport failure. Never alters the prompt.
    pub transport_retries: u32,
    pub max_in_flight: usize,
    pub bearer_token: Option<String>,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "http://localhost:11434".into(),
            timeout: Duration::from_secs(120),
            transport_retries: 2,
            max_in_flight: 4,
            bearer_token: None,
        }
    }
}

struct Semaphore {
    available: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(permits: usize) -> Self {
        Self {
            available: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("semaphore poisoned");
        while *n == 0 {
            n = self.cv.wait(n).expect("semaphore poisoned");
        }
        *n -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().expect("semaphore poisoned") += 1;
        self.0.cv.notify_one();
    }
}

/// Non-streaming client for `POST <base>/api/chat`.
pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
    in_flight: Semaphore,
}

#[derive(Deserialize)]
struct ChatReply {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    #[serde(default)]
    content: String,
}

#[derive(Deserialize)]
struct TagsReply {
    #[serde(default)]
    models: Vec<TagModel>,
}

#[derive(Deserialize)]
struct TagModel {
    name: String,
    #[serde(default)]
    model: Option<String>,
}

enum Failure {
    Timeout,
    Other(String),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let url = reqwest::Url::parse(&config.base_url)
            .map_err(|e| BackendError::Config(format!("base_url {:?}: {e}", config.base_url)))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(BackendError::Config(format!(
                "base_url {:?} must use http or https",
                config.base_url
            )));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let in_flight = Semaphore::new(config.max_in_flight);
        Ok(Self {
            config,
            client,
            in_flight,
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    /// JSON body sent for a request: one system and one user message.
    pub fn request_body(request: &ChatRequest) -> serde_json::Value {
        let mut options = json!({ "temperature": request.temperature });
        if let Some(seed) = request.seed {
            options["seed"] = json!(seed);
        }
        json!({
            "model": request.model_id,
            "messages": [
                { "role": "system", "content": request.system_prompt },
                { "role": "user", "content": request.user_prompt },
            ],
            "stream": false,
            "options": options,
        })
    }

    fn with_auth(&self, builder: reqwest::blocking::RequestBuilder) -> reqwest::blocking::RequestBuilder {
        match &self.config.bearer_token {
            Some(token) => builder.bearer_auth(token),
            None => builder,
        }
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, Failure> {
        let response = self
            .with_auth(self.client.post(self.endpoint("/api/chat")))
            .json(body)
            .send()
            .map_err(classify)?;
        let status = response.status();
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(Failure::Other(format!("HTTP {status}: {}", truncate(&text, 200))));
        }
        let reply: ChatReply = response
            .json()
            .map_err(|e| Failure::Other(format!("malformed response body: {e}")))?;
        Ok(reply.message.content)
    }
}

fn classify(e: reqwest::Error) -> Failure {
    if e.is_timeout() {
        Failure::Timeout
    } else {
        Failure::Other(e.to_string())
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl ChatBackend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let body = Self::request_body(request);
        let _permit = self.in_flight.acquire();
        let started = Instant::now();
        let attempts = self.config.transport_retries + 1;
        let mut last = Failure::Other("no attempt made".into());
        for attempt in 1..=attempts {
            match self.attempt(&body) {
                Ok(text) => {
                    debug!(
                        "chat ok: segment={} agent={} round={} attempt={attempt}",
                        request.tag.segment_id, request.tag.agent, request.tag.round
                    );
                    return Ok(ChatResponse {
                        text,
                        latency: started.elapsed(),
                        backend: BackendKind::Http,
                        received_at_ms: now_ms(),
                    });
                }
                Err(failure) => {
                    if let Failure::Other(msg) = &failure {
                        warn!("chat attempt {attempt}/{attempts} failed: {msg}");
                    } else {
                        warn!("chat attempt {attempt}/{attempts} timed out");
                    }
                    last = failure;
                }
            }
        }
        Err(match last {
            Failure::Timeout => BackendError::Timeout {
                secs: self.config.timeout.as_secs(),
                attempts,
            },
            Failure::Other(message) => BackendError::Transport { attempts, message },
        })
    }

    fn probe(&self, model_id: &str) -> Result<(), BackendError> {
        let response = self
            .with_auth(self.client.get(self.endpoint("/api/tags")))
            .send()
            .map_err(|e| BackendError::Transport {
                attempts: 1,
                message: e.to_string(),
            })?;
        let status = response.status();
        if !status.is_success() {
            return Err(BackendError::Transport {
                attempts: 1,
                message: format!("HTTP {status} from /api/tags"),
            });
        }
        let tags: TagsReply = response.json().map_err(|e| BackendError::Transport {
            attempts: 1,
            message: format!("malformed /api/tags body: {e}"),
        })?;
        let wanted = [model_id.to_string(), format!("{model_id}:latest")];
        let served = tags.models.iter().any(|m| {
            wanted.contains(&m.name) || m.model.as_ref().is_some_and(|x| wanted.contains(x))
        });
        if served {
            Ok(())
        } else {
            Err(BackendError::ModelUnavailable {
                model: model_id.to_string(),
                endpoint: self.config.base_url.clone(),
            })
        }
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::RequestTag;

    #[test]
    fn body_has_one_system_and_one_user_message() {
        let req = ChatRequest {
            model_id: "llama3".into(),
            system_prompt: "sys".into(),
            user_prompt: "usr".into(),
            temperature: 0.5,
            seed: Some(7),
            tag: RequestTag::default(),
        };
        let body = HttpBackend::request_body(&req);
        assert_eq!(body["model"], "llama3");
        assert_eq!(body["stream"], false);
        assert_eq!(body["messages"].as_array().unwrap().len(), 2);
        assert_eq!(body["messages"][0]["role"], "system");
        assert_eq!(body["messages"][1]["content"], "usr");
        assert_eq!(body["options"]["temperature"], 0.5);
        assert_eq!(body["options"]["seed"], 7);

        let body = HttpBackend::request_body(&ChatRequest { seed: None, ..req });
        assert!(body["options"].get("seed").is_none());
    }

    #[test]
    fn rejects_bad_url() {
        let cfg = HttpConfig {
            base_url: "not a url".into(),
            ..HttpConfig::default()
        };
        assert!(matches!(HttpBackend::new(cfg), Err(BackendError::Config(_))));
        let cfg = HttpConfig {
            base_url: "ftp://host".into(),
            ..HttpConfig::default()
        };
        assert!(HttpBackend::new(cfg).is_err());
    }
}
