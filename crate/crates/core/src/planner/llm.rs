//! Chat-completion transport for the LLM-driven planner roles.

use std::fmt;
use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

pub const API_KEY_VAR: &str = "FA_FORGE_LLM_KEY";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("network error: {0}")]
    Network(String),
    #[error("request timed out")]
    Timeout,
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("quota exhausted (HTTP 429)")]
    Quota,
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("missing configuration: {0}")]
    Config(String),
}

/// Secret that never prints.
#[derive(Clone, PartialEq, Eq)]
pub struct ApiKey(String);

impl ApiKey {
    pub fn new(key: impl Into<String>) -> Self {
        Self(key.into())
    }

    pub fn from_env() -> Result<Self, LlmError> {
        match std::env::var(API_KEY_VAR) {
            Ok(k) if !k.trim().is_empty() => Ok(Self(k.trim().to_string())),
            _ => Err(LlmError::Config(format!("set {API_KEY_VAR} to use an LLM backend"))),
        }
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for ApiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("ApiKey(<redacted>)")
    }
}

#[derive(Debug, Clone)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key: ApiKey,
    pub temperature: f64,
    pub timeout: Duration,
    pub max_retries: usize,
}

impl LlmConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: ApiKey) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            temperature: 0.0,
            timeout: Duration::from_secs(60),
            max_retries: 2,
        }
    }

    /// Key taken from the environment.
    pub fn from_env(endpoint: impl Into<String>, model: impl Into<String>) -> Result<Self, LlmError> {
        Ok(Self::new(endpoint, model, ApiKey::from_env()?))
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        })
    }
}

/// Anything that answers a prompt with text.
pub trait ChatModel: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
}

/// HTTP chat-completions client.
#[derive(Debug, Clone)]
pub struct HttpChat {
    pub config: LlmConfig,
}

impl HttpChat {
    pub fn new(config: LlmConfig) -> Self {
        Self { config }
    }
}

impl ChatModel for HttpChat {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        llm_complete(prompt, &self.config)
    }
}

pub fn llm_complete(prompt: &str, config: &LlmConfig) -> Result<String, LlmError> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(config.timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let mut response = agent
        .post(&config.endpoint)
        .header("Authorization", &format!("Bearer {}", config.api_key.expose()))
        .send_json(config.request_body(prompt))
        .map_err(|e| match e {
            ureq::Error::Timeout(_) => LlmError::Timeout,
            other => LlmError::Network(other.to_string()),
        })?;
    let status = response.status().as_u16();
    let body = response
        .body_mut()
        .read_to_string()
        .map_err(|e| LlmError::Network(e.to_string()))?;
    match status {
        200..=299 => {}
        429 => return Err(LlmError::Quota),
        _ => {
            return Err(LlmError::Status {
                status,
                body: body.chars().take(500).collect(),
            })
        }
    }
    let value: Value = serde_json::from_str(&body).map_err(|e| LlmError::Malformed(e.to_string()))?;
    let text = value["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| LlmError::Malformed("no choices[0].message.content".into()))?;
    if text.is_empty() {
        return Err(LlmError::Malformed("empty completion".into()));
    }
    Ok(text.to_string())
}
