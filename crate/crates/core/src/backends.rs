//! Model inference clients.
//!
//! Everything above this module talks to a [`Backend`]. Two implementations
//! ship here: [`RemoteBackend`] speaks the OpenAI-compatible chat-completions
//! protocol over HTTP, and [`ScriptedBackend`] replays canned responses keyed by
//! sample, turn and caller role. [`RecordingBackend`] wraps either and keeps a
//! log of every request for assertions.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::imaging::{png_data_uri, ImagingError, RasterImage};

/// Environment variable holding the bearer token for remote backends.
pub const API_KEY_ENV: &str = "ERGO_API_KEY";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    Precondition(String),
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("backend returned HTTP {status}: {body}")]
    Protocol { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    Response(String),
    #[error("no scripted response for {0}")]
    ScriptedMiss(ScriptKey),
    #[error("invalid script: {0}")]
    Script(String),
    #[error(transparent)]
    Image(#[from] ImagingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// An image ready for the wire: PNG data URI plus the dimensions it encodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImagePart {
    pub data_uri: String,
    pub width: u32,
    pub height: u32,
}

impl ImagePart {
    pub fn from_image(img: &RasterImage) -> Result<Self, ImagingError> {
        Ok(Self {
            data_uri: png_data_uri(img)?,
            width: img.width(),
            height: img.height(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Part {
    Text { text: String },
    Image(ImagePart),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<Part>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self {
            role,
            parts: vec![Part::Text { text: text.into() }],
        }
    }

    pub fn images(&self) -> impl Iterator<Item = &ImagePart> {
        self.parts.iter().filter_map(|p| match p {
            Part::Image(img) => Some(img),
            Part::Text { .. } => None,
        })
    }

    pub fn joined_text(&self) -> String {
        self.parts
            .iter()
            .filter_map(|p| match p {
                Part::Text { text } => Some(text.as_str()),
                Part::Image(_) => None,
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Who is asking: the policy being trained or evaluated, or the reward judge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Caller {
    Policy,
    Reward,
}

impl fmt::Display for Caller {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Caller::Policy => "policy",
            Caller::Reward => "reward",
        })
    }
}

/// Metadata attached to every completion request.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CallContext {
    pub sample_id: String,
    pub turn: u32,
    pub caller: Caller,
    /// Rollout index within a training group, 1-based.
    pub rollout: Option<u32>,
    /// Experimental condition, e.g. `masked`.
    pub variant: Option<String>,
}

impl CallContext {
    pub fn new(sample_id: impl Into<String>, turn: u32, caller: Caller) -> Self {
        Self {
            sample_id: sample_id.into(),
            turn,
            caller,
            rollout: None,
            variant: None,
        }
    }

    pub fn with_rollout(mut self, rollout: Option<u32>) -> Self {
        self.rollout = rollout;
        self
    }

    pub fn with_variant(mut self, variant: Option<&str>) -> Self {
        self.variant = variant.map(str::to_string);
        self
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, ctx: &CallContext, messages: &[ChatMessage]) -> Result<String, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, ctx: &CallContext, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (**self).complete(ctx, messages)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, ctx: &CallContext, messages: &[ChatMessage]) -> Result<String, BackendError> {
        (**self).complete(ctx, messages)
    }
}

/// Checks the shape every backend requires of a conversation.
pub fn validate_messages(messages: &[ChatMessage]) -> Result<(), BackendError> {
    if messages.is_empty() {
        return Err(BackendError::Precondition("no messages".into()));
    }
    match messages.iter().find(|m| m.role != Role::System) {
        Some(m) if m.role == Role::User => {}
        Some(_) => {
            return Err(BackendError::Precondition(
                "first non-system message must come from the user".into(),
            ))
        }
        None => return Err(BackendError::Precondition("conversation has no user message".into())),
    }
    for (i, m) in messages.iter().enumerate() {
        if m.parts.is_empty() {
            return Err(BackendError::Precondition(format!("message {i} has no content")));
        }
        if m.role != Role::User && m.images().next().is_some() {
            return Err(BackendError::Precondition(format!(
                "message {i}: images are only allowed in user messages"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// Base URL; requests go to `{endpoint}/chat/completions`.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: f64,
    pub retries: u32,
    pub max_in_flight: usize,
    /// First retry delay; doubles on each further attempt.
    pub backoff_base_secs: f64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1".into(),
            model: "policy".into(),
            temperature: 0.0,
            max_tokens: 1024,
            timeout_secs: 120.0,
            retries: 3,
            max_in_flight: 8,
            backoff_base_secs: 0.5,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.timeout_secs > 0.0) {
            return Err(BackendError::Precondition("timeout_secs must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(BackendError::Precondition("max_in_flight must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(BackendError::Precondition("temperature must be non-negative".into()));
        }
        if !(self.backoff_base_secs >= 0.0) {
            return Err(BackendError::Precondition("backoff_base_secs must be non-negative".into()));
        }
        Ok(())
    }

    /// Delay before retry number `attempt` (0-based): `base * 2^attempt`, jittered by up to 20%.
    pub fn backoff(&self, attempt: u32, rng: &mut impl Rng) -> Duration {
        let nominal = self.backoff_base_secs * 2f64.powi(attempt as i32);
        let jitter = rng.gen_range(0.8..=1.2);
        Duration::from_secs_f64(nominal * jitter)
    }
}

/// JSON body for a chat-completions request.
pub fn request_body(cfg: &BackendConfig, messages: &[ChatMessage]) -> Value {
    let messages: Vec<Value> = messages
        .iter()
        .map(|m| {
            let content = if m.role == Role::User {
                Value::Array(
                    m.parts
                        .iter()
                        .map(|p| match p {
                            Part::Text { text } => json!({"type": "text", "text": text}),
                            Part::Image(img) => json!({"type": "image_url", "image_url": {"url": img.data_uri}}),
                        })
                        .collect(),
                )
            } else {
                Value::String(m.joined_text())
            };
            json!({"role": m.role, "content": content})
        })
        .collect();
    json!({
        "model": cfg.model,
        "temperature": cfg.temperature,
        "max_tokens": cfg.max_tokens,
        "messages": messages,
    })
}

/// Pulls the assistant text out of a chat-completions response.
pub fn response_text(body: &Value) -> Result<String, BackendError> {
    let content = body
        .pointer("/choices/0/message/content")
        .ok_or_else(|| BackendError::Response("missing choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        Value::Array(parts) => Ok(parts
            .iter()
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect::<Vec<_>>()
            .join("")),
        other => Err(BackendError::Response(format!("unexpected content type: {other}"))),
    }
}

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *p == 0 {
            p = self.cv.wait(p).unwrap_or_else(|e| e.into_inner());
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// HTTP client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct RemoteBackend {
    cfg: BackendConfig,
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    in_flight: Semaphore,
}

impl RemoteBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_api_key(cfg, api_key)
    }

    pub fn with_api_key(cfg: BackendConfig, api_key: Option<String>) -> Result<Self, BackendError> {
        cfg.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Precondition(format!("http client: {e}")))?;
        Ok(Self {
            url: format!("{}/chat/completions", cfg.endpoint.trim_end_matches('/')),
            in_flight: Semaphore::new(cfg.max_in_flight),
            cfg,
            api_key,
            client,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn attempt(&self, body: &Value) -> Result<String, Attempt> {
        let _permit = self.in_flight.acquire();
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Attempt::Transient(e.to_string()))?;
        if !status.is_success() {
            let err = BackendError::Protocol {
                status: status.as_u16(),
                body: text.chars().take(512).collect(),
            };
            return Err(if status.is_server_error() || status.as_u16() == 429 {
                Attempt::Retryable(err)
            } else {
                Attempt::Fatal(err)
            });
        }
        let json: Value = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(BackendError::Response(format!("invalid JSON: {e}"))))?;
        response_text(&json).map_err(Attempt::Fatal)
    }
}

enum Attempt {
    Transient(String),
    Retryable(BackendError),
    Fatal(BackendError),
}

impl Backend for RemoteBackend {
    fn complete(&self, ctx: &CallContext, messages: &[ChatMessage]) -> Result<String, BackendError> {
        validate_messages(messages)?;
        let body = request_body(&self.cfg, messages);
        let mut rng = rand::thread_rng();
        let mut attempt = 0;
        loop {
            let last = match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(msg)) => BackendError::Unavailable {
                    attempts: attempt + 1,
                    message: msg,
                },
                Err(Attempt::Retryable(e)) => e,
            };
            if attempt >= self.cfg.retries {
                return Err(last);
            }
            log::warn!(
                "{} turn {} ({}): attempt {} failed: {last}",
                ctx.sample_id,
                ctx.turn,
                ctx.caller,
                attempt + 1
            );
            std::thread::sleep(self.cfg.backoff(attempt, &mut rng));
            attempt += 1;
        }
    }
}

/// Lookup key for scripted responses.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScriptKey {
    pub sample_id: String,
    pub turn: u32,
    pub caller: Caller,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollout: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
}

impl fmt::Display for ScriptKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.sample_id)?;
        if let Some(g) = self.rollout {
            write!(f, "#{g}")?;
        }
        if let Some(v) = &self.variant {
            write!(f, "@{v}")?;
        }
        write!(f, "/turn{}/{}", self.turn, self.caller)
    }
}

impl From<&CallContext> for ScriptKey {
    fn from(ctx: &CallContext) -> Self {
        Self {
            sample_id: ctx.sample_id.clone(),
            turn: ctx.turn,
            caller: ctx.caller,
            rollout: ctx.rollout,
            variant: ctx.variant.clone(),
        }
    }
}

/// One line of a script file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(flatten)]
    pub key: ScriptKey,
    pub response: String,
}

/// Replays fixed responses. A request carrying a rollout index falls back to
/// the entry without one; the variant must always match exactly.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    script: HashMap<ScriptKey, String>,
}

impl ScriptedBackend {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Result<Self, BackendError> {
        let mut script = HashMap::new();
        for e in entries {
            if script.insert(e.key.clone(), e.response).is_some() {
                return Err(BackendError::Script(format!("duplicate key {}", e.key)));
            }
        }
        Ok(Self { script })
    }

    /// Reads a JSON-Lines script: one [`ScriptEntry`] object per line.
    pub fn from_jsonl(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(line)
                .map_err(|e| BackendError::Script(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(entry);
        }
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.script.len()
    }

    pub fn is_empty(&self) -> bool {
        self.script.is_empty()
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, ctx: &CallContext, messages: &[ChatMessage]) -> Result<String, BackendError> {
        validate_messages(messages)?;
        let key = ScriptKey::from(ctx);
        if let Some(text) = self.script.get(&key) {
            return Ok(text.clone());
        }
        if key.rollout.is_some() {
            let shared = ScriptKey {
                rollout: None,
                ..key.clone()
            };
            if let Some(text) = self.script.get(&shared) {
                return Ok(text.clone());
            }
        }
        Err(BackendError::ScriptedMiss(key))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedCall {
    pub ctx: CallContext,
    pub messages: Vec<ChatMessage>,
}

/// Forwards to an inner backend and logs every request.
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<Vec<RecordedCall>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<RecordedCall> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn clear(&self) {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).clear();
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn complete(&self, ctx: &CallContext, messages: &[ChatMessage]) -> Result<String, BackendError> {
        self.log.lock().unwrap_or_else(|e| e.into_inner()).push(RecordedCall {
            ctx: ctx.clone(),
            messages: messages.to_vec(),
        });
        self.inner.complete(ctx, messages)
    }
}
