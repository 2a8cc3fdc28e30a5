// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Judge, JudgeMethod, JudgeRequest, JudgeScore, ScoreKind};
use crate::error::{Error, Result};
use crate::persona::PersonaSpec;

/// Number of alternatives requested per output position.
pub const TOP_LOGPROBS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmJudgeConfig {
    /// Base URL; `/chat/completions` is appended.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_in_flight() -> usize {
    4
}
fn default_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_timeout() -> u64 {
    60
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

/// Body of a chat-completion request asking for per-token log-probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub logprobs: bool,
    pub top_logprobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportError {
    pub message: String,
    /// Rate limits, timeouts and 5xx responses are worth retrying.
    pub retryable: bool,
}

/// Sends a request and returns the top log-probabilities of the first output position.
pub trait Transport: Send + Sync {
    fn top_logprobs(&self, request: &ChatRequest) -> std::result::Result<Vec<TopLogprob>, TransportError>;
}

/// Blocking HTTP transport for OpenAI-style `/chat/completions` endpoints.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    api_key: String,
}

impl HttpTransport {
    pub fn new(config: &LlmJudgeConfig) -> Result<Self> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| Error::Invalid(format!("environment variable {} is not set", config.api_key_env)))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Invalid(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            client,
            url: format!("{}/chat/completions", config.endpoint.trim_end_matches('/')),
            api_key,
        })
    }
}

fn parse_first_position(body: &Value) -> Option<Vec<TopLogprob>> {
    let first = body.pointer("/choices/0/logprobs/content/0/top_logprobs")?;
    serde_json::from_value(first.clone()).ok()
}

impl Transport for HttpTransport {
    fn top_logprobs(&self, request: &ChatRequest) -> std::result::Result<Vec<TopLogprob>, TransportError> {
        let resp = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(request)
            .send()
            .map_err(|e| TransportError {
                message: e.to_string(),
                retryable: e.is_timeout() || e.is_connect(),
            })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(TransportError {
                message: format!("HTTP {status}"),
                retryable: status.as_u16() == 429 || status.is_server_error(),
            });
        }
        let body: Value = resp.json().map_err(|e| TransportError {
            message: format!("malformed response body: {e}"),
            retryable: false,
        })?;
        parse_first_position(&body).ok_or_else(|| TransportError {
            message: "response carries no top_logprobs".into(),
            retryable: false,
        })
    }
}

/// Probability-weighted mean of the integer tokens (0-100) among the first
/// [`TOP_LOGPROBS`] alternatives, renormalized over the kept tokens.
///
/// `None` when no alternative parses as such an integer.
pub fn logit_weighted_score(top: &[TopLogprob]) -> Option<f64> {
    let kept: Vec<(f64, f64)> = top
        .iter()
        .take(TOP_LOGPROBS)
        .filter_map(|t| {
            let s = t.token.trim();
            if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
                return None;
            }
            let n: u32 = s.parse().ok()?;
            (n <= 100 && t.logprob.is_finite()).then_some((f64::from(n), t.logprob))
        })
        .collect();
    let max = kept.iter().map(|(_, lp)| *lp).fold(f64::NEG_INFINITY, f64::max);
    if kept.is_empty() {
        return None;
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (n, lp) in &kept {
        let w = (lp - max).exp();
        num += w * n;
        den += w;
    }
    Some(num / den)
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
            while *free == 0 {
                free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.cv.notify_one();
        out
    }
}

/// Judge backed by an external chat model.
pub struct LlmJudge {
    transport: Box<dyn Transport>,
    model: String,
    persona: String,
    definition: String,
    max_retries: u32,
    backoff: Duration,
    slots: Semaphore,
}

impl LlmJudge {
    pub fn new(config: &LlmJudgeConfig, persona: &PersonaSpec, transport: Box<dyn Transport>) -> Result<Self> {
        if config.max_in_flight == 0 {
            return Err(Error::Invalid("max_in_flight must be at least 1".into()));
        }
        Ok(Self {
            transport,
            model: config.model.clone(),
            persona: persona.name.clone(),
            definition: persona.definition.clone(),
            max_retries: config.max_retries,
            backoff: Duration::from_millis(config.backoff_ms),
            slots: Semaphore {
                free: Mutex::new(config.max_in_flight),
                cv: Condvar::new(),
            },
        })
    }

    /// Connects over HTTP using the key in `config.api_key_env`.
    pub fn http(config: &LlmJudgeConfig, persona: &PersonaSpec) -> Result<Self> {
        let transport = HttpTransport::new(config)?;
        Self::new(config, persona, Box::new(transport))
    }

    pub fn prompt(&self, request: &JudgeRequest<'_>, kind: ScoreKind) -> String {
        match kind {
            ScoreKind::Trait => format!(
                "You are grading a chatbot reply for the persona \"{name}\".\n\
                 Persona description: {def}\n\n\
                 User message:\n{q}\n\nChatbot reply:\n{r}\n\n\
                 On a scale from 0 (no trace of the persona) to 100 (the persona dominates the reply), \
                 how strongly does the reply express it? Answer with one integer and nothing else.",
                name = self.persona,
                def = self.definition,
                q = request.question,
                r = request.response,
            ),
            ScoreKind::Coherency => format!(
                "Grade only the language quality of the chatbot reply below, ignoring tone and persona.\n\n\
                 User message:\n{q}\n\nChatbot reply:\n{r}\n\n\
                 Use 0 for gibberish or text unrelated to the message and 100 for fluent, \
                 well-formed, on-topic text. Answer with one integer and nothing else.",
                q = request.question,
                r = request.response,
            ),
        }
    }

    fn request(&self, prompt: String) -> ChatRequest {
        ChatRequest {
            model: self.model.clone(),
            messages: vec![Message {
                role: "user".into(),
                content: prompt,
            }],
            max_tokens: 1,
            temperature: 0.0,
            logprobs: true,
            top_logprobs: TOP_LOGPROBS,
        }
    }
}

impl Judge for LlmJudge {
    fn score(&self, request: &JudgeRequest<'_>, kind: ScoreKind) -> Result<JudgeScore> {
        let body = self.request(self.prompt(request, kind));
        let fail = |reason: String| Error::Judge {
            sample: request.sample_id.to_string(),
            reason,
        };
        let top = self.slots.run(|| {
            let mut attempt = 0;
            loop {
                match self.transport.top_logprobs(&body) {
                    Ok(top) => return Ok(top),
                    Err(e) if e.retryable && attempt < self.max_retries => {
                        log::warn!("judge request for {} failed ({}); retrying", request.sample_id, e.message);
                        std::thread::sleep(self.backoff * 2u32.saturating_pow(attempt));
                        attempt += 1;
                    }
                    Err(e) => return Err(fail(e.message)),
                }
            }
        })?;
        let value = logit_weighted_score(&top)
            .ok_or_else(|| fail("no integer token among the top log-probabilities".into()))?;
        JudgeScore::new(value, kind, JudgeMethod::LlmLogitWeighted)
    }
}
