//! OpenAI-compatible chat-completions client.
//!
//! Images travel as base64 data URLs inside `image_url` content parts.
//! First-token probabilities come from `logprobs`/`top_logprobs`. Scoring a
//! supplied completion uses the `echo` + `prompt_logprobs` extension served by
//! vLLM-style inference servers: the completion is sent as a trailing
//! assistant turn and its tokens are recovered from the tail of the prompt
//! log-probabilities.

use std::collections::BTreeMap;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, Capabilities, CompletionRequest, CompletionResult, Speaker, Usage};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpBackendConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: super::RetryPolicy,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "yes")]
    pub logprobs: bool,
    #[serde(default)]
    pub teacher_forcing: bool,
    #[serde(default = "yes")]
    pub images: bool,
}

fn default_max_in_flight() -> usize {
    8
}

fn default_timeout() -> u64 {
    120
}

fn yes() -> bool {
    true
}

impl HttpBackendConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpBackendConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key_env: None,
            max_in_flight: default_max_in_flight(),
            retry: Default::default(),
            timeout_secs: default_timeout(),
            logprobs: true,
            teacher_forcing: false,
            images: true,
        }
    }
}

#[derive(Debug)]
pub struct HttpBackend {
    name: String,
    config: HttpBackendConfig,
    api_key: Option<String>,
    client: reqwest::Client,
}

impl HttpBackend {
    pub fn new(name: impl Into<String>, config: HttpBackendConfig) -> Result<Self> {
        let name = name.into();
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                Error::Config(format!("backend {name}: environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("backend {name}: {e}")))?;
        Ok(HttpBackend { name, config, api_key, client })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    pub fn request_body(&self, request: &CompletionRequest) -> Value {
        let last_user = request.messages.iter().rposition(|m| m.speaker == Speaker::User);
        let mut messages: Vec<Value> = request
            .messages
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let role = match m.speaker {
                    Speaker::System => "system",
                    Speaker::User => "user",
                    Speaker::Assistant => "assistant",
                };
                if Some(i) == last_user && !request.images.is_empty() {
                    let mut parts = vec![json!({"type": "text", "text": m.text})];
                    parts.extend(
                        request
                            .images
                            .iter()
                            .map(|img| json!({"type": "image_url", "image_url": {"url": img.data_url()}})),
                    );
                    json!({"role": role, "content": parts})
                } else {
                    json!({"role": role, "content": m.text})
                }
            })
            .collect();

        let opts = &request.options;
        let mut body = json!({
            "model": self.config.model,
            "temperature": opts.temperature,
        });
        if let Some(forced) = &opts.teacher_forced_completion {
            messages.push(json!({"role": "assistant", "content": forced}));
            body["max_tokens"] = json!(1);
            body["echo"] = json!(true);
            body["prompt_logprobs"] = json!(0);
            body["add_generation_prompt"] = json!(false);
            body["continue_final_message"] = json!(true);
        } else {
            body["max_tokens"] = json!(opts.max_tokens);
            if opts.top_logprobs > 0 {
                body["logprobs"] = json!(true);
                body["top_logprobs"] = json!(opts.top_logprobs);
            }
        }
        body["messages"] = Value::Array(messages);
        body
    }
}

#[async_trait]
impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.name
    }

    fn model(&self) -> &str {
        &self.config.model
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            logprobs: self.config.logprobs,
            teacher_forcing: self.config.teacher_forcing,
            images: self.config.images,
        }
    }

    async fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        let mut builder = self.client.post(self.endpoint()).json(&self.request_body(request));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().await.map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                BackendError::Transient(e.to_string())
            } else {
                BackendError::Fatal(Error::Transport(e.to_string()))
            }
        })?;
        let status = response.status();
        if status.as_u16() == 401 || status.as_u16() == 403 {
            return Err(BackendError::Fatal(Error::Transport(format!(
                "{}: authentication failed ({status})",
                self.name
            ))));
        }
        if status.as_u16() == 408 || status.as_u16() == 429 || status.is_server_error() {
            return Err(BackendError::Transient(format!("{}: HTTP {status}", self.name)));
        }
        let body = response
            .text()
            .await
            .map_err(|e| BackendError::Transient(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Fatal(Error::Transport(format!(
                "{}: HTTP {status}: {body}",
                self.name
            ))));
        }
        let value: Value = serde_json::from_str(&body)
            .map_err(|e| BackendError::Fatal(Error::Transport(format!("{}: malformed response: {e}", self.name))))?;
        parse_response(&value, request).map_err(BackendError::Fatal)
    }
}

/// Extracts text, first-token top log-probabilities, forced-completion token
/// log-probabilities and usage from a chat-completions response body.
pub fn parse_response(value: &Value, request: &CompletionRequest) -> Result<CompletionResult> {
    let choice = value
        .pointer("/choices/0")
        .ok_or_else(|| Error::Transport("response has no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();

    let mut first_token_logprobs = BTreeMap::new();
    if let Some(top) = choice.pointer("/logprobs/content/0/top_logprobs").and_then(Value::as_array) {
        for entry in top {
            let (Some(token), Some(lp)) = (
                entry.get("token").and_then(Value::as_str),
                entry.get("logprob").and_then(Value::as_f64),
            ) else {
                continue;
            };
            first_token_logprobs
                .entry(token.to_string())
                .and_modify(|existing: &mut f64| *existing = log_add_exp(*existing, lp))
                .or_insert(lp);
        }
    }

    let token_logprobs = match &request.options.teacher_forced_completion {
        Some(completion) => {
            let prompt = value
                .get("prompt_logprobs")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::Capability("response lacks prompt_logprobs".into()))?;
            let entries: Vec<(String, f64)> = prompt
                .iter()
                .filter_map(|slot| slot.as_object())
                .filter_map(|slot| slot.values().next())
                .filter_map(|v| {
                    Some((
                        v.get("decoded_token")?.as_str()?.to_string(),
                        v.get("logprob")?.as_f64()?,
                    ))
                })
                .collect();
            Some(align_forced_tail(&entries, completion).ok_or_else(|| {
                Error::Capability("cannot align prompt log-probabilities with the forced completion".into())
            })?)
        }
        None => None,
    };

    let usage = Usage {
        prompt_tokens: value.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0) as u32,
        completion_tokens: value
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0) as u32,
    };

    Ok(CompletionResult {
        text,
        first_token_logprobs,
        token_logprobs,
        usage,
        cache_hit: false,
    })
}

/// Smallest tail of `(decoded_token, logprob)` entries whose concatenation
/// equals `completion` modulo surrounding whitespace.
pub fn align_forced_tail(entries: &[(String, f64)], completion: &str) -> Option<Vec<f64>> {
    let target = completion.trim();
    if target.is_empty() {
        return None;
    }
    let mut acc = String::new();
    for start in (0..entries.len()).rev() {
        acc.insert_str(0, &entries[start].0);
        let trimmed = acc.trim();
        if trimmed == target {
            return Some(entries[start..].iter().map(|(_, lp)| *lp).collect());
        }
        if trimmed.len() > target.len() {
            return None;
        }
    }
    None
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}
