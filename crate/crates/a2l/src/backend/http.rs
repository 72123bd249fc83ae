//! HTTP transport and the wire mappings for the two endpoint families:
//! completion-style (`chat_completions`) and annotator-style
//! (`generate_content`). All field mapping lives here so either family can
//! back any of the policy, annotator, or verifier roles.

use std::time::Duration;

use serde_json::{json, Value};

use super::{
    Backend, BackendConfig, BackendError, ChatMessage, ChatRequest, ChatResponse, FinishReason,
    Part, Role, TokenUsage,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WireFormat {
    ChatCompletions,
    GenerateContent,
}

impl std::str::FromStr for WireFormat {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "chat_completions" => Ok(WireFormat::ChatCompletions),
            "generate_content" => Ok(WireFormat::GenerateContent),
            other => Err(BackendError::InvalidRequest(format!(
                "unknown wire format {other:?}"
            ))),
        }
    }
}

fn completions_content(message: &ChatMessage) -> Value {
    let parts: Vec<Value> = message
        .parts
        .iter()
        .map(|part| match part {
            Part::Text(text) => json!({"type": "text", "text": text}),
            Part::Image(locator) => json!({"type": "image_url", "image_url": {"url": locator}}),
        })
        .collect();
    Value::Array(parts)
}

fn generate_content_parts(message: &ChatMessage) -> Value {
    let parts: Vec<Value> = message
        .parts
        .iter()
        .map(|part| match part {
            Part::Text(text) => json!({"text": text}),
            Part::Image(locator) => json!({"file_data": {"file_uri": locator}}),
        })
        .collect();
    Value::Array(parts)
}

/// Builds the request body for one completion call.
pub fn build_chat_body(format: WireFormat, request: &ChatRequest) -> Value {
    match format {
        WireFormat::ChatCompletions => {
            let messages: Vec<Value> = request
                .messages
                .iter()
                .map(|m| json!({"role": m.role.as_str(), "content": completions_content(m)}))
                .collect();
            let mut body = json!({
                "model": request.model,
                "messages": messages,
                "temperature": request.temperature,
                "top_p": request.top_p,
            });
            if let Some(max) = request.max_tokens {
                body["max_tokens"] = json!(max);
            }
            if request.want_logprobs {
                body["logprobs"] = json!(true);
            }
            body
        }
        WireFormat::GenerateContent => {
            let mut system_parts: Vec<Value> = Vec::new();
            let mut contents: Vec<Value> = Vec::new();
            for message in &request.messages {
                match message.role {
                    Role::System => {
                        if let Value::Array(parts) = generate_content_parts(message) {
                            system_parts.extend(parts);
                        }
                    }
                    Role::User => contents
                        .push(json!({"role": "user", "parts": generate_content_parts(message)})),
                    Role::Assistant => contents
                        .push(json!({"role": "model", "parts": generate_content_parts(message)})),
                }
            }
            let mut generation = json!({
                "temperature": request.temperature,
                "topP": request.top_p,
            });
            if let Some(max) = request.max_tokens {
                generation["maxOutputTokens"] = json!(max);
            }
            let mut body = json!({
                "contents": contents,
                "generationConfig": generation,
            });
            if !system_parts.is_empty() {
                body["systemInstruction"] = json!({"parts": system_parts});
            }
            body
        }
    }
}

fn excerpt(body: &str) -> String {
    let trimmed: String = body.chars().take(200).collect();
    trimmed
}

fn completions_text(content: &Value) -> Option<String> {
    match content {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

fn finish_reason(tag: Option<&str>) -> FinishReason {
    match tag {
        Some("stop") | Some("STOP") => FinishReason::Stop,
        Some("length") | Some("MAX_TOKENS") => FinishReason::Length,
        _ => FinishReason::Other,
    }
}

/// Parses a successful (HTTP 200) response body.
pub fn parse_chat_body(format: WireFormat, body: &str) -> Result<ChatResponse, BackendError> {
    let value: Value = serde_json::from_str(body)
        .map_err(|_| BackendError::ProtocolError(excerpt(body)))?;
    match format {
        WireFormat::ChatCompletions => {
            let choice = value
                .get("choices")
                .and_then(|c| c.get(0))
                .ok_or_else(|| BackendError::ProtocolError(excerpt(body)))?;
            let text = choice
                .get("message")
                .and_then(|m| m.get("content"))
                .and_then(|c| completions_text(c))
                .ok_or_else(|| BackendError::ProtocolError(excerpt(body)))?;
            let usage = value.get("usage").map(|u| TokenUsage {
                prompt: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0) as u32,
                completion: u
                    .get("completion_tokens")
                    .and_then(Value::as_u64)
                    .unwrap_or(0) as u32,
            });
            let logprobs = choice
                .get("logprobs")
                .and_then(|l| l.get("content"))
                .and_then(Value::as_array)
                .map(|tokens| {
                    tokens
                        .iter()
                        .filter_map(|t| t.get("logprob").and_then(Value::as_f64))
                        .collect::<Vec<f64>>()
                });
            Ok(ChatResponse {
                text,
                finish_reason: finish_reason(
                    choice.get("finish_reason").and_then(Value::as_str),
                ),
                usage,
                logprobs,
            })
        }
        WireFormat::GenerateContent => {
            let candidate = value
                .get("candidates")
                .and_then(|c| c.get(0))
                .ok_or_else(|| BackendError::ProtocolError(excerpt(body)))?;
            let text = candidate
                .get("content")
                .and_then(|c| c.get("parts"))
                .and_then(Value::as_array)
                .map(|parts| {
                    parts
                        .iter()
                        .filter_map(|p| p.get("text").and_then(Value::as_str))
                        .collect::<Vec<_>>()
                        .join("")
                })
                .ok_or_else(|| BackendError::ProtocolError(excerpt(body)))?;
            let usage = value.get("usageMetadata").map(|u| TokenUsage {
                prompt: u
                    .get("promptTokenCount")
                    .and_then(Value::as_u64)
                    .unwrap_or(0) as u32,
                completion: u
                    .get("candidatesTokenCount")
                    .and_then(Value::as_u64)
                    .unwrap_or(0) as u32,
            });
            Ok(ChatResponse {
                text,
                finish_reason: finish_reason(
                    candidate.get("finishReason").and_then(Value::as_str),
                ),
                usage,
                logprobs: None,
            })
        }
    }
}

/// POSTs one JSON body and returns (status, body text). The sole seam
/// between the backend logic and the network.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
        timeout: Duration,
    ) -> Result<(u16, String), BackendError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self { client })
    }
}

impl Transport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
        timeout: Duration,
    ) -> Result<(u16, String), BackendError> {
        let mut builder = self.client.post(url).timeout(timeout).json(body);
        for (name, value) in headers {
            builder = builder.header(name, value);
        }
        let response = builder.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = response.status().as_u16();
        let text = response
            .text()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok((status, text))
    }
}

/// A chat-completion endpoint reached over HTTP.
pub struct HttpBackend {
    cfg: BackendConfig,
    format: WireFormat,
    transport: Box<dyn Transport>,
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig, format: WireFormat) -> Result<Self, BackendError> {
        Ok(Self {
            cfg,
            format,
            transport: Box::new(ReqwestTransport::new()?),
        })
    }

    pub fn with_transport(
        cfg: BackendConfig,
        format: WireFormat,
        transport: Box<dyn Transport>,
    ) -> Self {
        Self {
            cfg,
            format,
            transport,
        }
    }

    fn credential(&self) -> Result<String, BackendError> {
        std::env::var(&self.cfg.credential_env).map_err(|_| {
            BackendError::Unauthorized(format!(
                "credential environment variable {} not set",
                self.cfg.credential_env
            ))
        })
    }

    fn headers(&self, key: &str) -> Vec<(String, String)> {
        match self.format {
            WireFormat::ChatCompletions => {
                vec![("Authorization".to_string(), format!("Bearer {key}"))]
            }
            WireFormat::GenerateContent => {
                vec![("x-goog-api-key".to_string(), key.to_string())]
            }
        }
    }

    fn dispatch(&self, body: &Value) -> Result<String, BackendError> {
        let key = self.credential()?;
        let (status, text) = self.transport.post_json(
            &self.cfg.endpoint,
            &self.headers(&key),
            body,
            self.cfg.timeout,
        )?;
        match status {
            200 => Ok(text),
            401 | 403 => Err(BackendError::Unauthorized(excerpt(&text))),
            408 => Err(BackendError::Timeout),
            429 => Err(BackendError::RateLimited),
            500..=599 => Err(BackendError::ServerError(status)),
            _ => Err(BackendError::ProtocolError(format!(
                "status {status}: {}",
                excerpt(&text)
            ))),
        }
    }
}

impl Backend for HttpBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let body = build_chat_body(self.format, request);
        let text = self.dispatch(&body)?;
        parse_chat_body(self.format, &text)
    }

    /// Scores a forced completion by appending it as an assistant turn and
    /// requesting echo log-probabilities with zero new tokens. The endpoint
    /// must support assistant-echo scoring; only the completions family
    /// exposes it.
    fn score(&self, prompt: &[ChatMessage], completion: &str) -> Result<Vec<f64>, BackendError> {
        if self.format != WireFormat::ChatCompletions {
            return Err(BackendError::CapabilityMissing("logprobs"));
        }
        let mut request = ChatRequest::new(self.cfg.model.clone());
        request.messages = prompt.to_vec();
        request
            .messages
            .push(ChatMessage::text(Role::Assistant, completion));
        request.want_logprobs = true;
        request.max_tokens = Some(0);
        let body = build_chat_body(self.format, &request);
        let text = self.dispatch(&body)?;
        let parsed = parse_chat_body(self.format, &text)?;
        parsed
            .logprobs
            .ok_or_else(|| BackendError::ProtocolError("no logprobs in response".into()))
    }
}
