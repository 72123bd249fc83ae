//! Uniform client abstraction over chat-completion endpoints (policy,
//! annotator, verifier): request/response wire model, retries with
//! exponential backoff, a sliding-window rate cap, optional per-token
//! log-probabilities, and a scriptable mock for tests.
//!
//! A [`Client`] handle is shareable across concurrent callers; rate-limit
//! and retry state are internally synchronized. Individual calls are
//! independent, with no ordering guarantees across callers.

mod clock;
pub mod http;
mod mock;

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

pub use clock::{Clock, SystemClock, VirtualClock};
pub use mock::{load_script, MatchRule, MockBackend, ScriptEntry, ScriptedFailure, ScriptedOutcome};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited by backend")]
    RateLimited,
    #[error("unauthorized: {0}")]
    Unauthorized(String),
    #[error("backend lacks required capability: {0}")]
    CapabilityMissing(&'static str),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("server error (status {0})")]
    ServerError(u16),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("mock script exhausted: no entry matches the request")]
    ScriptExhausted,
}

impl BackendError {
    /// Transient failures are retried; everything else surfaces immediately.
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            BackendError::Timeout
                | BackendError::RateLimited
                | BackendError::ServerError(_)
                | BackendError::Transport(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

/// One content part of a message: inline text or an image attachment
/// referenced by locator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Part {
    Text(String),
    Image(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            parts: vec![Part::Text(text.into())],
        }
    }

    pub fn user(parts: Vec<Part>) -> Self {
        Self {
            role: Role::User,
            parts,
        }
    }

    /// All text parts joined by newlines.
    pub fn text_content(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text(t) => Some(t.as_str()),
                Part::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: Option<u32>,
    pub want_logprobs: bool,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            messages: Vec::new(),
            temperature: 1.0,
            top_p: 1.0,
            max_tokens: None,
            want_logprobs: false,
        }
    }

    pub fn message(mut self, message: ChatMessage) -> Self {
        self.messages.push(message);
        self
    }

    pub fn sampling(mut self, temperature: f64, top_p: f64) -> Self {
        self.temperature = temperature;
        self.top_p = top_p;
        self
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::InvalidRequest("no messages".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} out of [0, 2]",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidRequest(format!(
                "top_p {} out of (0, 1]",
                self.top_p
            )));
        }
        Ok(())
    }

    pub fn has_image_parts(&self) -> bool {
        self.messages
            .iter()
            .any(|m| m.parts.iter().any(|p| matches!(p, Part::Image(_))))
    }

    /// Concatenation of all text content and image locators, the surface the
    /// mock's match rules inspect.
    pub fn flat_text(&self) -> String {
        let mut out = String::new();
        for message in &self.messages {
            for part in &message.parts {
                match part {
                    Part::Text(t) => out.push_str(t),
                    Part::Image(locator) => out.push_str(locator),
                }
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinishReason {
    Stop,
    Length,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenUsage {
    pub prompt: u32,
    pub completion: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Option<TokenUsage>,
    /// Per-token log-probabilities of the completion; present only when
    /// requested and supported.
    pub logprobs: Option<Vec<f64>>,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            finish_reason: FinishReason::Stop,
            usage: None,
            logprobs: None,
        }
    }
}

/// Endpoint configuration. Credentials travel only through the named
/// environment variable, never through config files.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub endpoint: String,
    /// Default model id callers use when building requests.
    pub model: String,
    pub credential_env: String,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Sliding-window cap on issued requests per 60 s; 0 disables the cap.
    pub requests_per_minute: u32,
    pub supports_images: bool,
    pub supports_logprobs: bool,
    pub initial_backoff: Duration,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: String::new(),
            credential_env: "A2L_API_KEY".to_string(),
            timeout: Duration::from_secs(60),
            max_retries: 3,
            requests_per_minute: 60,
            supports_images: true,
            supports_logprobs: false,
            initial_backoff: Duration::from_millis(500),
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.timeout.is_zero() {
            return Err(BackendError::InvalidRequest("timeout must be > 0".into()));
        }
        Ok(())
    }
}

/// Raw completion transport. Implementations: [`http::HttpBackend`] and the
/// scriptable [`MockBackend`].
pub trait Backend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    /// Per-token log-probabilities of `completion` forced under `prompt`.
    fn score(
        &self,
        prompt: &[ChatMessage],
        completion: &str,
    ) -> Result<Vec<f64>, BackendError>;
}

/// Mean and per-token log-probabilities of one forced completion.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCompletion {
    pub token_logprobs: Vec<f64>,
    pub mean: f64,
}

/// Retry, rate-limit, and capability enforcement around a [`Backend`].
pub struct Client {
    backend: Arc<dyn Backend>,
    cfg: BackendConfig,
    clock: Arc<dyn Clock>,
    issued: Mutex<VecDeque<Duration>>,
}

const RATE_WINDOW: Duration = Duration::from_secs(60);

impl Client {
    pub fn new(backend: Arc<dyn Backend>, cfg: BackendConfig, clock: Arc<dyn Clock>) -> Self {
        Self {
            backend,
            cfg,
            clock,
            issued: Mutex::new(VecDeque::new()),
        }
    }

    pub fn with_system_clock(backend: Arc<dyn Backend>, cfg: BackendConfig) -> Self {
        Self::new(backend, cfg, Arc::new(SystemClock::new()))
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    /// Issues a completion with exponential backoff on transient failures,
    /// at most `max_retries` retries, under the requests-per-minute cap.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        self.cfg.validate()?;
        if request.has_image_parts() && !self.cfg.supports_images {
            return Err(BackendError::CapabilityMissing("images"));
        }
        if request.want_logprobs && !self.cfg.supports_logprobs {
            return Err(BackendError::CapabilityMissing("logprobs"));
        }
        self.with_retries(|| self.backend.complete(request))
    }

    /// Backend-reported log-probability of each token of the forced
    /// completion, plus the arithmetic mean.
    pub fn score_completion(
        &self,
        prompt: &[ChatMessage],
        completion: &str,
    ) -> Result<ScoredCompletion, BackendError> {
        if !self.cfg.supports_logprobs {
            return Err(BackendError::CapabilityMissing("logprobs"));
        }
        if completion.is_empty() {
            return Err(BackendError::InvalidRequest(
                "empty completion: nothing to score".into(),
            ));
        }
        let token_logprobs = self.with_retries(|| self.backend.score(prompt, completion))?;
        if token_logprobs.is_empty() {
            return Err(BackendError::ProtocolError(
                "backend returned no token log-probabilities".into(),
            ));
        }
        let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
        Ok(ScoredCompletion {
            token_logprobs,
            mean,
        })
    }

    fn with_retries<T>(
        &self,
        call: impl Fn() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let mut attempt = 0u32;
        loop {
            self.rate_gate();
            match call() {
                Ok(value) => return Ok(value),
                Err(err) if err.is_transient() && attempt < self.cfg.max_retries => {
                    self.clock.sleep(self.backoff_delay(attempt));
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }

    fn backoff_delay(&self, attempt: u32) -> Duration {
        self.cfg
            .initial_backoff
            .saturating_mul(2u32.saturating_pow(attempt))
    }

    /// Blocks until issuing one more request keeps the 60 s window at or
    /// under the configured cap, then records the issue time.
    fn rate_gate(&self) {
        if self.cfg.requests_per_minute == 0 {
            return;
        }
        loop {
            let now = self.clock.now();
            let wait = {
                let mut issued = self.issued.lock().unwrap();
                while let Some(&front) = issued.front() {
                    if now.saturating_sub(front) >= RATE_WINDOW {
                        issued.pop_front();
                    } else {
                        break;
                    }
                }
                if issued.len() < self.cfg.requests_per_minute as usize {
                    issued.push_back(now);
                    return;
                }
                (*issued.front().expect("nonempty at cap") + RATE_WINDOW).saturating_sub(now)
            };
            self.clock.sleep(wait.max(Duration::from_millis(1)));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mock_client(entries: Vec<ScriptEntry>, cfg: BackendConfig) -> (Arc<MockBackend>, Client) {
        let clock = Arc::new(VirtualClock::new());
        let backend = Arc::new(MockBackend::with_clock(entries, clock.clone()).unwrap());
        let client = Client::new(backend.clone(), cfg, clock);
        (backend, client)
    }

    fn hello_request() -> ChatRequest {
        ChatRequest::new("test-model").message(ChatMessage::text(Role::User, "hello"))
    }

    #[test]
    fn scripted_reply_round_trips() {
        let (_, client) = mock_client(vec![ScriptEntry::reply("ok")], BackendConfig::default());
        let response = client.complete(&hello_request()).unwrap();
        assert_eq!(response.text, "ok");
    }

    #[test]
    fn retries_twice_then_succeeds() {
        let entries = vec![
            ScriptEntry::failure(ScriptedFailure::Server(500)),
            ScriptEntry::failure(ScriptedFailure::Timeout),
            ScriptEntry::reply("recovered"),
        ];
        let cfg = BackendConfig {
            max_retries: 3,
            ..BackendConfig::default()
        };
        let (backend, client) = mock_client(entries, cfg);
        let response = client.complete(&hello_request()).unwrap();
        assert_eq!(response.text, "recovered");
        assert_eq!(backend.transcript().len(), 3);
    }

    #[test]
    fn retry_count_bounded_and_delays_nondecreasing() {
        let entries: Vec<_> = (0..10)
            .map(|_| ScriptEntry::failure(ScriptedFailure::RateLimited))
            .collect();
        let cfg = BackendConfig {
            max_retries: 2,
            ..BackendConfig::default()
        };
        let clock = Arc::new(VirtualClock::new());
        let backend = Arc::new(MockBackend::with_clock(entries, clock.clone()).unwrap());
        let client = Client::new(backend.clone(), cfg, clock.clone());
        let err = client.complete(&hello_request()).unwrap_err();
        assert!(matches!(err, BackendError::RateLimited));
        assert_eq!(backend.transcript().len(), 3); // 1 + max_retries
        let sleeps = clock.recorded_sleeps();
        assert_eq!(sleeps.len(), 2);
        assert!(sleeps.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let entries = vec![
            ScriptEntry::failure(ScriptedFailure::Unauthorized),
            ScriptEntry::reply("unreachable"),
        ];
        let (backend, client) = mock_client(entries, BackendConfig::default());
        assert!(matches!(
            client.complete(&hello_request()),
            Err(BackendError::Unauthorized(_))
        ));
        assert_eq!(backend.transcript().len(), 1);
    }

    #[test]
    fn image_parts_require_capability() {
        let cfg = BackendConfig {
            supports_images: false,
            ..BackendConfig::default()
        };
        let (_, client) = mock_client(vec![ScriptEntry::reply("x")], cfg);
        let request = ChatRequest::new("m").message(ChatMessage::user(vec![
            Part::Text("look".into()),
            Part::Image("obs_0.jpg".into()),
        ]));
        assert!(matches!(
            client.complete(&request),
            Err(BackendError::CapabilityMissing("images"))
        ));
    }

    #[test]
    fn rate_cap_holds_over_any_window() {
        let entries: Vec<_> = (0..30).map(|_| ScriptEntry::reply("ok")).collect();
        let cfg = BackendConfig {
            requests_per_minute: 10,
            max_retries: 0,
            ..BackendConfig::default()
        };
        let clock = Arc::new(VirtualClock::new());
        let backend = Arc::new(MockBackend::with_clock(entries, clock.clone()).unwrap());
        let client = Client::new(backend, cfg, clock.clone());
        let mut issue_times = Vec::new();
        for _ in 0..30 {
            client.complete(&hello_request()).unwrap();
            issue_times.push(clock.now());
        }
        for (i, &t) in issue_times.iter().enumerate() {
            let in_window = issue_times[i..]
                .iter()
                .take_while(|&&u| u.saturating_sub(t) < RATE_WINDOW)
                .count();
            assert!(in_window <= 10, "window starting at {t:?} held {in_window}");
        }
    }

    #[test]
    fn score_completion_reports_mean() {
        let (_, client) = mock_client(
            vec![ScriptEntry::score(vec![-1.0, -3.0])],
            BackendConfig {
                supports_logprobs: true,
                ..BackendConfig::default()
            },
        );
        let scored = client
            .score_completion(&[ChatMessage::text(Role::User, "p")], "completion")
            .unwrap();
        assert_eq!(scored.token_logprobs, vec![-1.0, -3.0]);
        assert!((scored.mean - -2.0).abs() < 1e-12);
    }

    #[test]
    fn score_five_tokens_mean_matches_sum() {
        let logprobs = vec![-0.5, -1.5, -2.25, -0.125, -4.0];
        let (_, client) = mock_client(
            vec![ScriptEntry::score(logprobs.clone())],
            BackendConfig {
                supports_logprobs: true,
                ..BackendConfig::default()
            },
        );
        let scored = client
            .score_completion(&[ChatMessage::text(Role::User, "p")], "c")
            .unwrap();
        let expected = logprobs.iter().sum::<f64>() / 5.0;
        assert!((scored.mean - expected).abs() < 1e-12);
    }

    #[test]
    fn empty_completion_cannot_be_scored() {
        let (_, client) = mock_client(
            vec![ScriptEntry::score(vec![-1.0])],
            BackendConfig {
                supports_logprobs: true,
                ..BackendConfig::default()
            },
        );
        assert!(matches!(
            client.score_completion(&[ChatMessage::text(Role::User, "p")], ""),
            Err(BackendError::InvalidRequest(_))
        ));
    }

    #[test]
    fn score_requires_logprobs_capability() {
        let (_, client) = mock_client(vec![ScriptEntry::score(vec![-1.0])], BackendConfig::default());
        assert!(matches!(
            client.score_completion(&[ChatMessage::text(Role::User, "p")], "c"),
            Err(BackendError::CapabilityMissing("logprobs"))
        ));
    }

    #[test]
    fn request_validation_rejects_bad_sampling() {
        assert!(ChatRequest::new("m").validate().is_err()); // no messages
        let req = hello_request().sampling(3.0, 0.95);
        assert!(req.validate().is_err());
        let req = hello_request().sampling(0.5, 0.0);
        assert!(req.validate().is_err());
    }
}
