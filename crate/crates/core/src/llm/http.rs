//! Chat-completions wire protocol over a pluggable HTTP transport.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};

use super::{ModelConfig, Provider, ProviderError};

#[derive(Debug, Clone, PartialEq)]
pub struct HttpRequest {
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("timed out")]
    Timeout,
    #[error("connection failed: {0}")]
    Connect(String),
}

pub trait Transport: Send + Sync {
    fn post(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError>;
}

/// Provider for endpoints that accept `{"model", "messages", "temperature"}`
/// and answer with `choices[0].message.content`.
pub struct ChatCompletionsProvider<T> {
    transport: T,
    api_key: Option<String>,
}

impl<T: Transport> ChatCompletionsProvider<T> {
    pub fn new(transport: T, api_key: Option<String>) -> Self {
        ChatCompletionsProvider { transport, api_key }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn request_body(config: &ModelConfig, prompt: &str) -> Value {
        json!({
            "model": config.model_id,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": config.temperature,
        })
    }
}

fn extract_content(body: &str) -> Result<String, ProviderError> {
    let v: Value = serde_json::from_str(body).map_err(|e| ProviderError::Transient(format!("invalid JSON response: {e}")))?;
    let message = v
        .pointer("/choices/0/message")
        .ok_or_else(|| ProviderError::Transient("response has no choices".into()))?;
    match message.get("content").and_then(Value::as_str) {
        Some(text) => Ok(text.to_owned()),
        // Some vendors report refusals in a dedicated field with null content.
        None => message
            .get("refusal")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| ProviderError::Transient("response message has no content".into())),
    }
}

impl<T: Transport> Provider for ChatCompletionsProvider<T> {
    fn send(&self, config: &ModelConfig, prompt: &str) -> Result<String, ProviderError> {
        let mut headers = vec![("Content-Type".to_owned(), "application/json".to_owned())];
        if let Some(key) = &self.api_key {
            headers.push(("Authorization".to_owned(), format!("Bearer {key}")));
        }
        let request = HttpRequest {
            url: config.endpoint.clone(),
            headers,
            body: Self::request_body(config, prompt).to_string(),
            timeout: Duration::from_secs(config.timeout_secs),
        };
        let response = self.transport.post(&request).map_err(|e| match e {
            TransportError::Timeout => ProviderError::Timeout,
            TransportError::Connect(m) => ProviderError::Transient(m),
        })?;
        match response.status {
            200..=299 => extract_content(&response.body),
            429 => Err(ProviderError::RateLimited),
            408 | 500..=599 => Err(ProviderError::Transient(format!("HTTP {}", response.status))),
            s => Err(ProviderError::Fatal(format!("HTTP {s}: {}", truncate(&response.body, 300)))),
        }
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Replays canned responses in order and records every request.
#[derive(Debug, Default)]
pub struct ScriptedTransport {
    replies: Mutex<VecDeque<Result<HttpResponse, TransportError>>>,
    requests: Mutex<Vec<HttpRequest>>,
}

impl ScriptedTransport {
    pub fn new(replies: impl IntoIterator<Item = Result<HttpResponse, TransportError>>) -> Self {
        ScriptedTransport {
            replies: Mutex::new(replies.into_iter().collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    /// A 200 response carrying `content` in the chat-completions shape.
    pub fn ok(content: &str) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse {
            status: 200,
            body: json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}).to_string(),
        })
    }

    pub fn status(status: u16) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse {
            status,
            body: String::new(),
        })
    }

    pub fn requests(&self) -> Vec<HttpRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl Transport for ScriptedTransport {
    fn post(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        self.requests.lock().unwrap().push(request.clone());
        self.replies
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or(Err(TransportError::Connect("script exhausted".into())))
    }
}

#[cfg(feature = "http")]
pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

#[cfg(feature = "http")]
impl ReqwestTransport {
    pub fn new() -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder().build().map_err(|e| e.to_string())?;
        Ok(ReqwestTransport { client })
    }
}

#[cfg(feature = "http")]
impl Transport for ReqwestTransport {
    fn post(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let mut builder = self.client.post(&request.url).timeout(request.timeout);
        for (k, v) in &request.headers {
            builder = builder.header(k, v);
        }
        let response = builder.body(request.body.clone()).send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connect(e.to_string())
            }
        })?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Connect(e.to_string())
            }
        })?;
        Ok(HttpResponse { status, body })
    }
}
