use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, BackendKind, ChatBackend, ChatRequest, ChatResponse};
use crate::extraction::last_brace_region;
use crate::persona::AgentRole;

/// One scripted response. Unset matcher fields match anything; `attempt`
/// counts how often an identical request has been seen before (0 = first).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(default)]
    pub config: Option<String>,
    #[serde(default)]
    pub segment: Option<usize>,
    #[serde(default)]
    pub round: Option<u32>,
    #[serde(default)]
    pub agent: Option<String>,
    #[serde(default)]
    pub role: Option<AgentRole>,
    #[serde(default)]
    pub attempt: Option<u32>,
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub response: String,
    /// Answer with a transport error instead of `response`.
    #[serde(default)]
    pub transport_error: bool,
}

impl MockRule {
    pub fn new(response: impl Into<String>) -> Self {
        Self {
            response: response.into(),
            ..Self::default()
        }
    }

    pub fn segment(mut self, segment: usize) -> Self {
        self.segment = Some(segment);
        self
    }

    pub fn round(mut self, round: u32) -> Self {
        self.round = Some(round);
        self
    }

    pub fn agent(mut self, agent: impl Into<String>) -> Self {
        self.agent = Some(agent.into());
        self
    }

    pub fn role(mut self, role: AgentRole) -> Self {
        self.role = Some(role);
        self
    }

    pub fn attempt(mut self, attempt: u32) -> Self {
        self.attempt = Some(attempt);
        self
    }

    pub fn config(mut self, config: impl Into<String>) -> Self {
        self.config = Some(config.into());
        self
    }

    pub fn contains(mut self, needle: impl Into<String>) -> Self {
        self.contains = Some(needle.into());
        self
    }

    /// Rule that fails at the transport level.
    pub fn transport_failure() -> Self {
        Self {
            transport_error: true,
            ..Self::default()
        }
    }

    fn matches(&self, request: &ChatRequest, attempt: u32) -> bool {
        let tag = &request.tag;
        self.config.as_ref().is_none_or(|c| *c == tag.config_id)
            && self.segment.is_none_or(|s| s == tag.segment_id)
            && self.round.is_none_or(|r| r == tag.round)
            && self.agent.as_ref().is_none_or(|a| *a == tag.agent)
            && self.role.is_none_or(|r| Some(r) == tag.role)
            && self.attempt.is_none_or(|a| a == attempt)
            && self
                .contains
                .as_ref()
                .is_none_or(|needle| request.user_prompt.contains(needle.as_str()))
    }
}

/// Generates plausible, deterministic coding replies from request metadata.
/// Each category has a hidden "true" bit per segment; agents perturb it with
/// temperature-scaled noise, discussants in later rounds tend to adopt the
/// peer's dictionary, and a small share of first attempts omit the
/// dictionary entirely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCoder {
    pub seed: u64,
    pub base_rate: f64,
    pub noise: f64,
    pub noise_per_temperature: f64,
    pub adopt_rate: f64,
    pub format_failure_rate: f64,
}

impl Default for SyntheticCoder {
    fn default() -> Self {
        Self {
            seed: 0,
            base_rate: 0.2,
            noise: 0.03,
            noise_per_temperature: 0.12,
            adopt_rate: 0.7,
            format_failure_rate: 0.02,
        }
    }
}

impl SyntheticCoder {
    fn unit(&self, parts: &[&str]) -> f64 {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        for p in parts {
            hasher.update((p.len() as u64).to_le_bytes());
            hasher.update(p.as_bytes());
        }
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
    }

    /// The hidden reference label the synthetic agents perturb.
    pub fn reference_bit(&self, segment_id: usize, category: &str) -> bool {
        self.unit(&["base", &segment_id.to_string(), category]) < self.base_rate
    }

    fn respond(&self, request: &ChatRequest, attempt: u32, categories: &[String]) -> String {
        let tag = &request.tag;
        let seg = tag.segment_id.to_string();
        let round = tag.round.to_string();
        let att = attempt.to_string();
        let temp = format!("{:.2}", request.temperature);
        let salt = [
            tag.config_id.as_str(),
            seg.as_str(),
            round.as_str(),
            tag.agent.as_str(),
            att.as_str(),
        ];
        let key = |kind: &str, extra: &str| {
            let mut parts = vec![kind, extra];
            parts.extend_from_slice(&salt);
            self.unit(&parts)
        };

        let failure_rate = self.format_failure_rate * (1.0 + request.temperature);
        if attempt == 0 && key("format", "") < failure_rate {
            return format!(
                "{}: I believe this utterance reflects the tutor's intent, but I will not list codes.",
                tag.agent
            );
        }

        let discussing = tag.role == Some(AgentRole::Discussant) && tag.round >= 2;
        if discussing && key("adopt", "") < self.adopt_rate {
            if let Some(marker) = request.user_prompt.rfind("The previous turn said: ") {
                if let Some(region) = last_brace_region(&request.user_prompt[marker..]) {
                    return format!(
                        "{}: I agree with my peer's reasoning and revise my codes. Code: {{{region}}}",
                        tag.agent
                    );
                }
            }
        }

        let noise = match tag.role {
            Some(AgentRole::Consensus) => self.noise,
            _ => self.noise + self.noise_per_temperature * request.temperature,
        };
        let body: Vec<String> = categories
            .iter()
            .map(|c| {
                let mut bit = self.reference_bit(tag.segment_id, c);
                if key("flip", &format!("{c}|{temp}")) < noise {
                    bit = !bit;
                }
                format!("'{c}': {}", u8::from(bit))
            })
            .collect();
        format!(
            "{}: Based on the codebook definitions this is my assessment. Code: {{{}}}",
            tag.agent,
            body.join(", ")
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockDefault {
    Text(String),
    Synthetic(SyntheticCoder),
}

impl Default for MockDefault {
    fn default() -> Self {
        MockDefault::Text(String::new())
    }
}

/// Ordered rules, first match wins; `default` answers everything else.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default, rename = "rule")]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default: MockDefault,
    /// Models the mock reports as not served.
    #[serde(default)]
    pub unavailable_models: Vec<String>,
}

impl MockScript {
    pub fn new(rules: Vec<MockRule>, default: MockDefault) -> Self {
        Self {
            rules,
            default,
            unavailable_models: Vec::new(),
        }
    }

    pub fn synthetic(seed: u64) -> Self {
        Self::new(
            Vec::new(),
            MockDefault::Synthetic(SyntheticCoder {
                seed,
                ..SyntheticCoder::default()
            }),
        )
    }

    pub fn from_toml_str(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedRequest {
    pub request: ChatRequest,
    pub attempt: u32,
    pub response: String,
}

/// Deterministic test double. Identical request streams produce identical
/// response streams; every request is logged.
pub struct MockBackend {
    script: MockScript,
    categories: Vec<String>,
    seen: Mutex<HashMap<[u8; 32], u32>>,
    log: Mutex<Vec<LoggedRequest>>,
}

impl MockBackend {
    /// `categories` feeds the synthetic default; scripted rules ignore it.
    pub fn new(script: MockScript, categories: Vec<String>) -> Self {
        Self {
            script,
            categories,
            seen: Mutex::new(HashMap::new()),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn scripted(rules: Vec<MockRule>, default: impl Into<String>) -> Self {
        Self::new(MockScript::new(rules, MockDefault::Text(default.into())), Vec::new())
    }

    pub fn requests(&self) -> Vec<LoggedRequest> {
        self.log.lock().expect("mock log poisoned").clone()
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("mock log poisoned").len()
    }

    pub fn clear_log(&self) {
        self.log.lock().expect("mock log poisoned").clear();
    }

    fn identity(request: &ChatRequest) -> [u8; 32] {
        let bytes = serde_json::to_vec(request).expect("request serializes");
        Sha256::digest(&bytes).into()
    }

    fn respond(&self, request: &ChatRequest, attempt: u32) -> Result<String, BackendError> {
        if let Some(rule) = self.script.rules.iter().find(|r| r.matches(request, attempt)) {
            if rule.transport_error {
                return Err(BackendError::Transport {
                    attempts: 1,
                    message: "scripted transport failure".into(),
                });
            }
            return Ok(rule.response.clone());
        }
        Ok(match &self.script.default {
            MockDefault::Text(text) => text.clone(),
            MockDefault::Synthetic(coder) => coder.respond(request, attempt, &self.categories),
        })
    }
}

impl ChatBackend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let attempt = {
            let mut seen = self.seen.lock().expect("mock state poisoned");
            let count = seen.entry(Self::identity(request)).or_insert(0);
            let attempt = *count;
            *count += 1;
            attempt
        };
        let reply = self.respond(request, attempt);
        self.log.lock().expect("mock log poisoned").push(LoggedRequest {
            request: request.clone(),
            attempt,
            response: reply.as_ref().map_or_else(|e| format!("<{e}>"), Clone::clone),
        });
        let text = reply?;
        Ok(ChatResponse {
            text,
            latency: Duration::ZERO,
            backend: BackendKind::Mock,
            received_at_ms: 0,
        })
    }

    fn probe(&self, model_id: &str) -> Result<(), BackendError> {
        if self.script.unavailable_models.iter().any(|m| m == model_id) {
            return Err(BackendError::ModelUnavailable {
                model: model_id.to_string(),
                endpoint: "mock".into(),
            });
        }
        Ok(())
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::RequestTag;
    use proptest::prelude::*;

    fn request(segment: usize, round: u32, agent: &str, user: &str) -> ChatRequest {
        ChatRequest {
            model_id: "m".into(),
            system_prompt: "s".into(),
            user_prompt: user.into(),
            temperature: 0.0,
            seed: None,
            tag: RequestTag {
                config_id: "c".into(),
                segment_id: segment,
                round,
                agent: agent.into(),
                role: Some(AgentRole::Discussant),
            },
        }
    }

    #[test]
    fn first_matching_rule_wins() {
        let mock = MockBackend::scripted(
            vec![
                MockRule::new("Code: {'Greeting': 1}").segment(0).round(1).agent("A"),
                MockRule::new("second").segment(0),
            ],
            "default",
        );
        assert_eq!(mock.complete(&request(0, 1, "A", "u")).unwrap().text, "Code: {'Greeting': 1}");
        assert_eq!(mock.complete(&request(0, 2, "A", "u")).unwrap().text, "second");
        assert_eq!(mock.complete(&request(1, 1, "A", "u")).unwrap().text, "default");
        assert_eq!(mock.call_count(), 3);
    }

    #[test]
    fn attempt_counts_identical_requests() {
        let mock = MockBackend::scripted(
            vec![MockRule::new("garbage").attempt(0), MockRule::new("retry")],
            "",
        );
        let r = request(0, 1, "A", "u");
        assert_eq!(mock.complete(&r).unwrap().text, "garbage");
        assert_eq!(mock.complete(&r).unwrap().text, "retry");
        assert_eq!(mock.complete(&request(0, 1, "A", "other")).unwrap().text, "garbage");
        assert!(mock.probe("anything").is_ok());
    }

    #[test]
    fn script_file_format() {
        let script = MockScript::from_toml_str(
            r#"
            [[rule]]
            segment = 3
            agent = "Coder 1"
            role = "discussant"
            response = "{'Greeting': 1}"

            [default.synthetic]
            seed = 9
            "#,
        )
        .unwrap();
        assert_eq!(script.rules.len(), 1);
        assert_eq!(script.rules[0].role, Some(AgentRole::Discussant));
        assert!(matches!(script.default, MockDefault::Synthetic(SyntheticCoder { seed: 9, .. })));
    }

    #[test]
    fn synthetic_adopts_peer_dictionary() {
        let coder = SyntheticCoder {
            adopt_rate: 1.0,
            format_failure_rate: 0.0,
            ..SyntheticCoder::default()
        };
        let mock = MockBackend::new(
            MockScript::new(vec![], MockDefault::Synthetic(coder)),
            vec!["Greeting".into()],
        );
        let text = mock
            .complete(&request(0, 2, "B", "history\nThe previous turn said: x Code: {'Greeting': 1}"))
            .unwrap()
            .text;
        assert!(text.ends_with("{'Greeting': 1}"), "{text}");
    }

    proptest! {
        #[test]
        fn mock_is_deterministic(calls in prop::collection::vec((0usize..4, 1u32..3, 0usize..2), 1..30), seed in any::<u64>()) {
            let cats = vec!["Greeting".to_string(), "Instruction".to_string()];
            let run = || {
                let mock = MockBackend::new(MockScript::synthetic(seed), cats.clone());
                calls
                    .iter()
                    .map(|(s, r, a)| mock.complete(&request(*s, *r, ["A", "B"][*a], "u")).unwrap().text)
                    .collect::<Vec<_>>()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
