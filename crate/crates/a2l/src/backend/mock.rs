//! Deterministic scripted backend for tests and offline dry runs.
//!
//! A script is an ordered list of (match rule, outcome) entries. Each call
//! consumes the first live entry whose rule matches the request text;
//! entries marked `repeat` stay live. A call that matches nothing fails with
//! `ScriptExhausted`. Every received request is recorded in a transcript for
//! assertions.

use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Deserialize;

use super::{
    Backend, BackendError, ChatMessage, ChatRequest, ChatResponse, Clock, FinishReason, Role,
    TokenUsage,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MatchRule {
    Any,
    Contains(String),
}

impl MatchRule {
    fn matches(&self, text: &str) -> bool {
        match self {
            MatchRule::Any => true,
            MatchRule::Contains(needle) => text.contains(needle),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScriptedFailure {
    Timeout,
    RateLimited,
    Server(u16),
    Unauthorized,
}

impl ScriptedFailure {
    fn to_error(self) -> BackendError {
        match self {
            ScriptedFailure::Timeout => BackendError::Timeout,
            ScriptedFailure::RateLimited => BackendError::RateLimited,
            ScriptedFailure::Server(status) => BackendError::ServerError(status),
            ScriptedFailure::Unauthorized => BackendError::Unauthorized("scripted".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptedOutcome {
    Reply {
        text: String,
        usage: Option<TokenUsage>,
    },
    Score {
        logprobs: Vec<f64>,
    },
    Fail {
        failure: ScriptedFailure,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScriptEntry {
    pub rule: MatchRule,
    pub outcome: ScriptedOutcome,
    pub repeat: bool,
    /// Simulated call duration, applied through the mock's clock.
    pub latency: Option<Duration>,
}

impl ScriptEntry {
    pub fn reply(text: impl Into<String>) -> Self {
        Self {
            rule: MatchRule::Any,
            outcome: ScriptedOutcome::Reply {
                text: text.into(),
                usage: None,
            },
            repeat: false,
            latency: None,
        }
    }

    pub fn reply_on(needle: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            rule: MatchRule::Contains(needle.into()),
            ..Self::reply(text)
        }
    }

    pub fn score(logprobs: Vec<f64>) -> Self {
        Self {
            rule: MatchRule::Any,
            outcome: ScriptedOutcome::Score { logprobs },
            repeat: false,
            latency: None,
        }
    }

    pub fn score_on(needle: impl Into<String>, logprobs: Vec<f64>) -> Self {
        Self {
            rule: MatchRule::Contains(needle.into()),
            ..Self::score(logprobs)
        }
    }

    pub fn failure(failure: ScriptedFailure) -> Self {
        Self {
            rule: MatchRule::Any,
            outcome: ScriptedOutcome::Fail { failure },
            repeat: false,
            latency: None,
        }
    }

    pub fn recurring(mut self) -> Self {
        self.repeat = true;
        self
    }

    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    pub fn with_usage(mut self, prompt: u32, completion: u32) -> Self {
        if let ScriptedOutcome::Reply { usage, .. } = &mut self.outcome {
            *usage = Some(TokenUsage { prompt, completion });
        }
        self
    }
}

struct Slot {
    entry: ScriptEntry,
    consumed: bool,
}

pub struct MockBackend {
    slots: Mutex<Vec<Slot>>,
    transcript: Mutex<Vec<ChatRequest>>,
    clock: Option<Arc<dyn Clock>>,
}

impl MockBackend {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, BackendError> {
        if entries.is_empty() {
            return Err(BackendError::InvalidRequest("mock script is empty".into()));
        }
        Ok(Self {
            slots: Mutex::new(
                entries
                    .into_iter()
                    .map(|entry| Slot {
                        entry,
                        consumed: false,
                    })
                    .collect(),
            ),
            transcript: Mutex::new(Vec::new()),
            clock: None,
        })
    }

    /// Like [`MockBackend::new`], with a clock that scripted latencies
    /// advance, so mock runs produce deterministic timing.
    pub fn with_clock(entries: Vec<ScriptEntry>, clock: Arc<dyn Clock>) -> Result<Self, BackendError> {
        let mut mock = Self::new(entries)?;
        mock.clock = Some(clock);
        Ok(mock)
    }

    /// All requests received so far, in arrival order.
    pub fn transcript(&self) -> Vec<ChatRequest> {
        self.transcript.lock().unwrap().clone()
    }

    fn next_outcome(&self, request_text: &str) -> Result<ScriptedOutcome, BackendError> {
        let mut slots = self.slots.lock().unwrap();
        for slot in slots.iter_mut() {
            if !slot.consumed && slot.entry.rule.matches(request_text) {
                if !slot.entry.repeat {
                    slot.consumed = true;
                }
                if let Some(latency) = slot.entry.latency {
                    if let Some(clock) = &self.clock {
                        clock.sleep(latency);
                    }
                }
                return Ok(slot.entry.outcome.clone());
            }
        }
        Err(BackendError::ScriptExhausted)
    }
}

impl Backend for MockBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.transcript.lock().unwrap().push(request.clone());
        match self.next_outcome(&request.flat_text())? {
            ScriptedOutcome::Reply { text, usage } => Ok(ChatResponse {
                text,
                finish_reason: FinishReason::Stop,
                usage,
                logprobs: None,
            }),
            ScriptedOutcome::Score { .. } => Err(BackendError::ProtocolError(
                "score entry reached by a completion call".into(),
            )),
            ScriptedOutcome::Fail { failure } => Err(failure.to_error()),
        }
    }

    fn score(&self, prompt: &[ChatMessage], completion: &str) -> Result<Vec<f64>, BackendError> {
        let mut pseudo = ChatRequest::new("mock-score");
        pseudo.messages = prompt.to_vec();
        pseudo
            .messages
            .push(ChatMessage::text(Role::Assistant, completion));
        pseudo.want_logprobs = true;
        let flat = pseudo.flat_text();
        self.transcript.lock().unwrap().push(pseudo);
        match self.next_outcome(&flat)? {
            ScriptedOutcome::Score { logprobs } => Ok(logprobs),
            ScriptedOutcome::Reply { .. } => Err(BackendError::ProtocolError(
                "reply entry reached by a score call".into(),
            )),
            ScriptedOutcome::Fail { failure } => Err(failure.to_error()),
        }
    }
}

// On-disk script format, one `[[entry]]` table per scripted call.

#[derive(Deserialize)]
struct ScriptFile {
    #[serde(default)]
    entry: Vec<ScriptFileEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFileEntry {
    #[serde(rename = "match")]
    match_substring: Option<String>,
    reply: Option<String>,
    score: Option<Vec<f64>>,
    fail: Option<String>,
    #[serde(default)]
    repeat: bool,
    latency_s: Option<f64>,
    usage: Option<[u32; 2]>,
}

/// Loads a mock script from a TOML file. Each entry carries exactly one of
/// `reply`, `score`, or `fail` (`timeout` / `rate_limited` / `server` /
/// `unauthorized`), an optional `match` substring, and optional `repeat`,
/// `latency_s`, and `usage = [prompt, completion]`.
pub fn load_script(path: &Path) -> Result<Vec<ScriptEntry>, BackendError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BackendError::InvalidRequest(format!("cannot read script {path:?}: {e}")))?;
    let file: ScriptFile = toml::from_str(&text)
        .map_err(|e| BackendError::InvalidRequest(format!("bad script {path:?}: {e}")))?;
    let mut entries = Vec::new();
    for (i, raw) in file.entry.into_iter().enumerate() {
        let outcome = match (&raw.reply, &raw.score, &raw.fail) {
            (Some(text), None, None) => ScriptedOutcome::Reply {
                text: text.clone(),
                usage: raw.usage.map(|[prompt, completion]| TokenUsage {
                    prompt,
                    completion,
                }),
            },
            (None, Some(logprobs), None) => ScriptedOutcome::Score {
                logprobs: logprobs.clone(),
            },
            (None, None, Some(kind)) => ScriptedOutcome::Fail {
                failure: match kind.as_str() {
                    "timeout" => ScriptedFailure::Timeout,
                    "rate_limited" => ScriptedFailure::RateLimited,
                    "server" => ScriptedFailure::Server(500),
                    "unauthorized" => ScriptedFailure::Unauthorized,
                    other => {
                        return Err(BackendError::InvalidRequest(format!(
                            "entry {i}: unknown failure kind {other:?}"
                        )))
                    }
                },
            },
            _ => {
                return Err(BackendError::InvalidRequest(format!(
                    "entry {i}: exactly one of reply/score/fail required"
                )))
            }
        };
        entries.push(ScriptEntry {
            rule: match raw.match_substring {
                Some(s) => MatchRule::Contains(s),
                None => MatchRule::Any,
            },
            outcome,
            repeat: raw.repeat,
            latency: raw.latency_s.map(Duration::from_secs_f64),
        });
    }
    if entries.is_empty() {
        return Err(BackendError::InvalidRequest(format!(
            "script {path:?} has no entries"
        )));
    }
    Ok(entries)
}
