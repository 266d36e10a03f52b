use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{BackendError, CompletionRequest, CompletionResult, LlmBackend};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "ONENET_API_KEY";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Full chat-completions URL, e.g. `https://host/v1/chat/completions`.
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Retries after the first attempt, on transport errors, 429 and 5xx.
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    /// First backoff; doubles per retry.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    /// Overrides the request temperature when set.
    #[serde(default)]
    pub temperature: Option<f64>,
}

fn default_timeout_secs() -> u64 {
    120
}
fn default_retries() -> u32 {
    2
}
fn default_backoff_ms() -> u64 {
    500
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_retries(),
            backoff_ms: default_backoff_ms(),
            temperature: None,
        }
    }
}

/// Chat-completions client: posts a one-message conversation and reads the
/// first choice's content.
pub struct HttpBackend {
    id: String,
    config: HttpConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("id", &self.id)
            .field("config", &self.config)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(BackendError),
}

impl HttpBackend {
    /// Reads the token from `ONENET_API_KEY` when present.
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(config, key)
    }

    pub fn with_api_key(config: HttpConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Transport {
                attempts: 0,
                message: e.to_string(),
            })?;
        Ok(Self {
            id: format!("http:{}@{}", config.model, config.endpoint),
            config,
            api_key,
            client,
        })
    }

    fn attempt(&self, request: &CompletionRequest) -> Attempt {
        let body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "max_tokens": request.max_new_tokens,
            "temperature": self.config.temperature.unwrap_or(request.temperature),
            "seed": request.seed,
        });
        let mut req = self.client.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if status.as_u16() == 429 || status.is_server_error() {
            return Attempt::Retry(format!("HTTP {}: {}", status.as_u16(), snippet(&text)));
        }
        if !status.is_success() {
            return Attempt::Fatal(BackendError::Endpoint {
                status: status.as_u16(),
                body: snippet(&text),
            });
        }
        let parsed: ChatResponse = match serde_json::from_str(&text) {
            Ok(p) => p,
            Err(e) => return Attempt::Fatal(BackendError::Decode(e.to_string())),
        };
        match parsed.choices.into_iter().next() {
            Some(c) => Attempt::Done(c.message.content.unwrap_or_default()),
            None => Attempt::Fatal(BackendError::Decode("no choices in response".into())),
        }
    }
}

impl LlmBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.check()?;
        let started = Instant::now();
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                log::debug!("{}: retry {attempt} in {wait} ms ({last})", self.id);
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(request) {
                Attempt::Done(text) => {
                    return Ok(CompletionResult::new(
                        &request.prompt,
                        text,
                        &self.id,
                        started.elapsed(),
                    ))
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(msg) => last = msg,
            }
        }
        Err(BackendError::Transport {
            attempts,
            message: last,
        })
    }
}

fn snippet(s: &str) -> String {
    s.chars().take(200).collect()
}
