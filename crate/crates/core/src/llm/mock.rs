use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use regex::Regex;
use serde::Deserialize;

use super::{BackendError, CompletionRequest, CompletionResult, LlmBackend};
use crate::hashing::digest_parts;

#[derive(Debug, Clone)]
pub enum Pattern {
    Substring(String),
    Regex(Regex),
}

impl Pattern {
    pub fn matches(&self, prompt: &str) -> bool {
        match self {
            Pattern::Substring(s) => prompt.contains(s.as_str()),
            Pattern::Regex(r) => r.is_match(prompt),
        }
    }
}

#[derive(Debug, Clone)]
enum Outcome {
    Reply(String),
    Fail(String),
}

#[derive(Debug, Clone)]
pub struct MockRule {
    pattern: Pattern,
    outcome: Outcome,
}

impl MockRule {
    pub fn reply(pattern: Pattern, reply: impl Into<String>) -> Self {
        Self {
            pattern,
            outcome: Outcome::Reply(reply.into()),
        }
    }

    /// A rule whose match makes the call fail, for exercising error paths.
    pub fn fail(pattern: Pattern, message: impl Into<String>) -> Self {
        Self {
            pattern,
            outcome: Outcome::Fail(message.into()),
        }
    }
}

/// One line of a mock script.
///
/// `{"pattern": "...", "reply": "..."}` (add `"regex": true` for a regex),
/// `{"pattern": "...", "fail": "..."}`, or `{"default": "..."}`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptLine {
    pattern: Option<String>,
    #[serde(default)]
    regex: bool,
    reply: Option<String>,
    fail: Option<String>,
    default: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockCall {
    pub prompt: String,
    pub seed: u64,
    /// Index of the matching rule; `None` when the default reply was used.
    pub rule: Option<usize>,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Scripted backend: first matching rule wins, else the default reply.
///
/// Replies depend only on the prompt, so the backend is referentially
/// transparent. Every call is logged for call-count assertions.
#[derive(Debug)]
pub struct MockBackend {
    id: String,
    rules: Vec<MockRule>,
    default: Option<String>,
    latency: Duration,
    log: Mutex<Vec<MockCall>>,
}

impl MockBackend {
    pub fn new(rules: Vec<MockRule>, default: Option<String>) -> Self {
        let mut parts: Vec<Vec<u8>> = Vec::new();
        for r in &rules {
            match &r.pattern {
                Pattern::Substring(s) => parts.push(format!("s:{s}").into_bytes()),
                Pattern::Regex(re) => parts.push(format!("r:{}", re.as_str()).into_bytes()),
            }
            match &r.outcome {
                Outcome::Reply(t) => parts.push(format!("ok:{t}").into_bytes()),
                Outcome::Fail(t) => parts.push(format!("err:{t}").into_bytes()),
            }
        }
        parts.push(format!("default:{default:?}").into_bytes());
        let refs: Vec<&[u8]> = parts.iter().map(Vec::as_slice).collect();
        let id = format!("mock:{}", &digest_parts(&refs)[..12]);
        Self {
            id,
            rules,
            default,
            latency: Duration::ZERO,
            log: Mutex::new(Vec::new()),
        }
    }

    /// Replies `text` to everything.
    pub fn fixed(text: impl Into<String>) -> Self {
        Self::new(Vec::new(), Some(text.into()))
    }

    pub fn from_script(text: &str) -> Result<Self, BackendError> {
        let mut rules = Vec::new();
        let mut default = None;
        for (i, line) in text.lines().enumerate() {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let bad = |msg: String| BackendError::Script(format!("line {}: {msg}", i + 1));
            let parsed: ScriptLine = serde_json::from_str(trimmed).map_err(|e| bad(e.to_string()))?;
            match parsed {
                ScriptLine {
                    default: Some(d),
                    pattern: None,
                    reply: None,
                    fail: None,
                    ..
                } => default = Some(d),
                ScriptLine {
                    pattern: Some(p),
                    regex,
                    reply,
                    fail,
                    default: None,
                } => {
                    let pattern = if regex {
                        Pattern::Regex(Regex::new(&p).map_err(|e| bad(e.to_string()))?)
                    } else {
                        Pattern::Substring(p)
                    };
                    let rule = match (reply, fail) {
                        (Some(r), None) => MockRule::reply(pattern, r),
                        (None, Some(f)) => MockRule::fail(pattern, f),
                        _ => return Err(bad("a rule needs exactly one of reply/fail".into())),
                    };
                    rules.push(rule);
                }
                _ => return Err(bad("expected a rule or a default line".into())),
            }
        }
        Ok(Self::new(rules, default))
    }

    pub fn from_script_file(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
        Self::from_script(&text)
    }

    /// Sleeps this long per call, to stand in for endpoint latency.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("mock log poisoned").len()
    }

    pub fn calls(&self) -> Vec<MockCall> {
        self.log.lock().expect("mock log poisoned").clone()
    }

    pub fn reset(&self) {
        self.log.lock().expect("mock log poisoned").clear();
    }

    fn resolve(&self, prompt: &str) -> Result<(Option<usize>, String), BackendError> {
        for (i, rule) in self.rules.iter().enumerate() {
            if rule.pattern.matches(prompt) {
                return match &rule.outcome {
                    Outcome::Reply(t) => Ok((Some(i), t.clone())),
                    Outcome::Fail(m) => Err(BackendError::Script(format!("rule {i} failed: {m}"))),
                };
            }
        }
        match &self.default {
            Some(d) => Ok((None, d.clone())),
            None => Err(BackendError::Script(format!(
                "no rule matched and no default reply (prompt starts {:?})",
                prompt.chars().take(80).collect::<String>()
            ))),
        }
    }
}

impl LlmBackend for MockBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.check()?;
        if !self.latency.is_zero() {
            std::thread::sleep(self.latency);
        }
        let (rule, text) = self.resolve(&request.prompt)?;
        let result = CompletionResult::new(&request.prompt, text, &self.id, self.latency);
        self.log.lock().expect("mock log poisoned").push(MockCall {
            prompt: request.prompt.clone(),
            seed: request.seed,
            rule,
            input_tokens: result.input_tokens,
            output_tokens: result.output_tokens,
        });
        Ok(result)
    }
}
