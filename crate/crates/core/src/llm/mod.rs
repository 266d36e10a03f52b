//! Prompt-completion contract and its implementations.

mod cache;
mod http;
mod mock;
mod template;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use cache::CachedBackend;
pub(crate) use cache::write_atomic;
pub use http::{HttpBackend, HttpConfig, API_KEY_ENV};
pub use mock::{MockBackend, MockCall, MockRule, Pattern};
pub use template::{PromptTemplate, TemplateError, TemplateSet};

pub const DEFAULT_MAX_NEW_TOKENS: u32 = 1024;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned HTTP {status}: {body}")]
    Endpoint { status: u16, body: String },
    #[error("malformed endpoint response: {0}")]
    Decode(String),
    #[error("mock script: {0}")]
    Script(String),
    #[error("response cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_new_tokens: u32,
    pub seed: u64,
    pub temperature: f64,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            seed: 0,
            temperature: 0.0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature.max(0.0);
        self
    }

    pub fn with_max_new_tokens(mut self, n: u32) -> Self {
        self.max_new_tokens = n.max(1);
        self
    }

    pub(crate) fn check(&self) -> Result<(), BackendError> {
        if self.prompt.trim().is_empty() {
            Err(BackendError::EmptyPrompt)
        } else {
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub backend: String,
    #[serde(with = "millis")]
    pub latency: Duration,
}

impl CompletionResult {
    pub(crate) fn new(prompt: &str, text: String, backend: &str, latency: Duration) -> Self {
        Self {
            input_tokens: count_tokens(prompt),
            output_tokens: count_tokens(&text),
            text,
            backend: backend.to_string(),
            latency,
        }
    }
}

/// Per-call generation settings shared by all stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallOptions {
    pub max_new_tokens: u32,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for CallOptions {
    fn default() -> Self {
        Self {
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            temperature: 0.0,
            seed: 0,
        }
    }
}

impl CallOptions {
    pub fn request(&self, prompt: impl Into<String>) -> CompletionRequest {
        CompletionRequest::new(prompt)
            .with_seed(self.seed)
            .with_temperature(self.temperature)
            .with_max_new_tokens(self.max_new_tokens)
    }
}

/// Token totals over some number of completions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub calls: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

impl TokenUsage {
    pub fn of(result: &CompletionResult) -> Self {
        Self {
            calls: 1,
            input_tokens: result.input_tokens,
            output_tokens: result.output_tokens,
        }
    }

    pub fn total(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }
}

impl std::ops::Add for TokenUsage {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            calls: self.calls + o.calls,
            input_tokens: self.input_tokens + o.input_tokens,
            output_tokens: self.output_tokens + o.output_tokens,
        }
    }
}

impl std::ops::AddAssign for TokenUsage {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for TokenUsage {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

/// Anything that turns a prompt into text.
pub trait LlmBackend: Send + Sync {
    /// Stable identifier, used in cache keys and run manifests.
    fn id(&self) -> &str;

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError>;
}

/// Approximate token count: whitespace-delimited words plus punctuation marks.
///
/// This is not a model tokenizer. It exists so token accounting is
/// deterministic across backends. A chunk counts as a word when it holds at
/// least one alphanumeric character; every punctuation character is counted
/// on its own, so `"Hello, world!"` is 4.
pub fn count_tokens(text: &str) -> u64 {
    text.split_whitespace()
        .map(|chunk| {
            let word = u64::from(chunk.chars().any(char::is_alphanumeric));
            let punct = chunk.chars().filter(|c| is_punctuation(*c)).count() as u64;
            word + punct
        })
        .sum()
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control() && !c.is_ascii())
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

impl<T: LlmBackend + ?Sized> LlmBackend for std::sync::Arc<T> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        (**self).complete(request)
    }
}
