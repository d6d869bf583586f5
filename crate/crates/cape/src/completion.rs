//! Planning-LLM abstraction: a remote completion client with per-token
//! log-probabilities and a scripted backend for deterministic tests.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_PRESENCE_PENALTY: f64 = 0.5;

/// The prompt suffix a scripted rule is matched against.
pub const SCRIPT_TAIL_CHARS: usize = 400;

#[derive(Debug, thiserror::Error)]
pub enum CompletionError {
    #[error("prompt must be non-empty")]
    EmptyPrompt,
    #[error("no scripted rule matches prompt tail: {tail:?}")]
    UnmatchedPrompt { tail: String },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("backend does not support {capability}")]
    Unsupported { capability: &'static str },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub presence_penalty: f64,
    pub n_samples: u32,
    pub stop: Vec<String>,
    pub want_logprobs: bool,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            max_tokens: 64,
            temperature: DEFAULT_TEMPERATURE,
            presence_penalty: DEFAULT_PRESENCE_PENALTY,
            n_samples: 1,
            stop: vec!["\nStep".to_string()],
            want_logprobs: true,
        }
    }

    pub fn with_samples(mut self, n: u32) -> Self {
        self.n_samples = n.max(1);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionSample {
    pub text: String,
    pub token_logprobs: Vec<f64>,
    pub mean_logprob: f64,
}

impl CompletionSample {
    pub fn new(text: impl Into<String>, token_logprobs: Vec<f64>) -> Self {
        let mean_logprob = if token_logprobs.is_empty() {
            0.0
        } else {
            token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64
        };
        CompletionSample {
            text: text.into(),
            token_logprobs,
            mean_logprob,
        }
    }

    pub fn is_blank(&self) -> bool {
        self.text.trim().is_empty()
    }
}

/// Backend-call accounting shared by every implementation. A request
/// increments its counter exactly once regardless of internal retries.
#[derive(Debug, Default)]
pub struct CallCounter {
    completion: AtomicU64,
    scoring: AtomicU64,
}

impl CallCounter {
    pub fn completion_calls(&self) -> u64 {
        self.completion.load(Ordering::SeqCst)
    }

    pub fn scoring_calls(&self) -> u64 {
        self.scoring.load(Ordering::SeqCst)
    }

    fn count_completion(&self) {
        self.completion.fetch_add(1, Ordering::SeqCst);
    }

    fn count_scoring(&self) {
        self.scoring.fetch_add(1, Ordering::SeqCst);
    }
}

pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<CompletionSample>, CompletionError>;

    /// Mean log-probability of the continuation tokens given the prompt.
    fn score_continuation(&self, prompt: &str, continuation: &str) -> Result<f64, CompletionError>;

    fn counter(&self) -> &CallCounter;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptSample {
    pub text: String,
    #[serde(default)]
    pub token_logprobs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Substring matched against the prompt tail; first matching rule wins.
    pub matcher: String,
    pub samples: Vec<ScriptSample>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRule {
    /// Optional substring the prompt tail must also contain.
    #[serde(default)]
    pub when: Option<String>,
    pub continuation: String,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptFile {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub scores: Vec<ScoreRule>,
    #[serde(default = "default_score_floor")]
    pub score_floor: f64,
}

fn default_score_floor() -> f64 {
    -5.0
}

/// Deterministic test double. Matches rules against the last 400 characters
/// of the prompt; an unmatched prompt is an explicit error, never a silent
/// fallback.
pub struct ScriptedBackend {
    script: ScriptFile,
    counter: CallCounter,
    call_log: Mutex<Vec<String>>,
}

fn tail(prompt: &str) -> &str {
    let start = prompt
        .char_indices()
        .rev()
        .nth(SCRIPT_TAIL_CHARS - 1)
        .map(|(i, _)| i)
        .unwrap_or(0);
    &prompt[start..]
}

impl ScriptedBackend {
    pub fn new(script: ScriptFile) -> Self {
        ScriptedBackend {
            script,
            counter: CallCounter::default(),
            call_log: Mutex::new(Vec::new()),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(text)?))
    }

    pub fn call_log(&self) -> Vec<String> {
        self.call_log.lock().unwrap().clone()
    }
}

impl CompletionBackend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<CompletionSample>, CompletionError> {
        if request.prompt.is_empty() {
            return Err(CompletionError::EmptyPrompt);
        }
        self.counter.count_completion();
        self.call_log.lock().unwrap().push(request.prompt.clone());
        let t = tail(&request.prompt);
        let rule = self
            .script
            .rules
            .iter()
            .find(|r| t.contains(&r.matcher))
            .ok_or_else(|| CompletionError::UnmatchedPrompt {
                tail: t.to_string(),
            })?;
        let n = request.n_samples.max(1) as usize;
        Ok(rule
            .samples
            .iter()
            .take(n.max(1).min(rule.samples.len().max(1)))
            .map(|s| CompletionSample::new(s.text.clone(), s.token_logprobs.clone()))
            .collect())
    }

    fn score_continuation(&self, prompt: &str, continuation: &str) -> Result<f64, CompletionError> {
        self.counter.count_scoring();
        let t = tail(prompt);
        let score = self
            .script
            .scores
            .iter()
            .find(|r| {
                r.continuation == continuation
                    && r.when.as_ref().is_none_or(|w| t.contains(w.as_str()))
            })
            .map(|r| r.score)
            .unwrap_or(self.script.score_floor);
        Ok(score)
    }

    fn counter(&self) -> &CallCounter {
        &self.counter
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    presence_penalty: f64,
    n: u32,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    stop: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    logprobs: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    echo: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<String>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
    #[serde(default)]
    logprobs: Option<WireLogprobs>,
}

#[derive(Deserialize)]
struct WireLogprobs {
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    text_offset: Vec<usize>,
}

/// Remote `POST /completions` client. Configured via `CAPE_LLM_URL` and
/// `CAPE_API_KEY`; the model name is passed through opaquely.
pub struct RemoteBackend {
    url: String,
    api_key: Option<String>,
    model: Option<String>,
    client: reqwest::blocking::Client,
    counter: CallCounter,
    max_retries: u32,
}

impl RemoteBackend {
    pub fn new(url: impl Into<String>, api_key: Option<String>, model: Option<String>) -> Self {
        RemoteBackend {
            url: url.into(),
            api_key,
            model,
            client: reqwest::blocking::Client::new(),
            counter: CallCounter::default(),
            max_retries: 3,
        }
    }

    pub fn from_env() -> Option<Self> {
        let url = std::env::var("CAPE_LLM_URL").ok()?;
        Some(Self::new(
            url,
            std::env::var("CAPE_API_KEY").ok(),
            std::env::var("CAPE_MODEL").ok(),
        ))
    }

    fn post(&self, body: &WireRequest) -> Result<WireResponse, CompletionError> {
        let mut last_err = String::new();
        let mut attempts = 0;
        while attempts <= self.max_retries {
            attempts += 1;
            let mut req = self.client.post(&self.url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    return resp.json().map_err(|e| CompletionError::Transport {
                        message: e.to_string(),
                        attempts,
                    });
                }
                Ok(resp) if resp.status().as_u16() == 429 => {
                    let retry_after = resp
                        .headers()
                        .get("retry-after")
                        .and_then(|v| v.to_str().ok())
                        .and_then(|v| v.parse::<u64>().ok())
                        .unwrap_or(1);
                    last_err = "HTTP 429".into();
                    std::thread::sleep(Duration::from_secs(retry_after));
                    continue;
                }
                Ok(resp) => {
                    last_err = format!("HTTP {}", resp.status());
                }
                Err(e) => {
                    last_err = e.to_string();
                }
            }
            std::thread::sleep(Duration::from_millis(100 << attempts));
        }
        Err(CompletionError::Transport {
            message: last_err,
            attempts,
        })
    }
}

impl CompletionBackend for RemoteBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Vec<CompletionSample>, CompletionError> {
        if request.prompt.is_empty() {
            return Err(CompletionError::EmptyPrompt);
        }
        self.counter.count_completion();
        let body = WireRequest {
            prompt: &request.prompt,
            max_tokens: request.max_tokens,
            temperature: request.temperature,
            presence_penalty: request.presence_penalty,
            n: request.n_samples,
            stop: request.stop.clone(),
            logprobs: request.want_logprobs.then_some(1),
            echo: None,
            model: self.model.clone(),
        };
        let resp = self.post(&body)?;
        Ok(resp
            .choices
            .into_iter()
            .map(|c| {
                let logprobs = c
                    .logprobs
                    .map(|l| l.token_logprobs.into_iter().flatten().collect())
                    .unwrap_or_default();
                CompletionSample::new(c.text, logprobs)
            })
            .collect())
    }

    /// Echo/teacher-forcing scoring: the prompt plus continuation is echoed
    /// back with logprobs and the continuation's tokens are averaged.
    fn score_continuation(&self, prompt: &str, continuation: &str) -> Result<f64, CompletionError> {
        self.counter.count_scoring();
        let full = format!("{prompt}{continuation}");
        let body = WireRequest {
            prompt: &full,
            max_tokens: 0,
            temperature: 0.0,
            presence_penalty: 0.0,
            n: 1,
            stop: Vec::new(),
            logprobs: Some(1),
            echo: Some(true),
            model: self.model.clone(),
        };
        let resp = self.post(&body)?;
        let choice = resp.choices.into_iter().next().ok_or(CompletionError::Transport {
            message: "empty choices".into(),
            attempts: 1,
        })?;
        let Some(lp) = choice.logprobs else {
            return Err(CompletionError::Unsupported {
                capability: "echo logprobs",
            });
        };
        let boundary = prompt.len();
        let mut sum = 0.0;
        let mut n = 0usize;
        for (offset, logprob) in lp.text_offset.iter().zip(lp.token_logprobs.iter()) {
            if *offset >= boundary {
                if let Some(v) = logprob {
                    sum += v;
                    n += 1;
                }
            }
        }
        if n == 0 {
            return Err(CompletionError::Unsupported {
                capability: "continuation token scoring",
            });
        }
        Ok(sum / n as f64)
    }

    fn counter(&self) -> &CallCounter {
        &self.counter
    }
}
