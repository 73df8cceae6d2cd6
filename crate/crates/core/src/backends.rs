//! Chat-completion and embedding backends.
//!
//! Orchestration only sees [`ChatBackend`] and [`EmbeddingBackend`]. Remote
//! adapters translate to OpenAI-style or Anthropic-style wire formats at the
//! edge; scripted and fixed backends make every run reproducible offline.

use std::collections::{HashMap, VecDeque};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable after {attempts} attempt(s): {message}")]
    Unavailable { attempts: u32, message: String },
    #[error("backend timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("backend configuration error: {0}")]
    Configuration(String),
    #[error("scripted backend exhausted after {consumed} line(s)")]
    Exhausted { consumed: usize },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("unexpected response: {0}")]
    Protocol(String),
}

impl BackendError {
    pub fn is_transient(&self) -> bool {
        matches!(
            self,
            BackendError::Unavailable { .. } | BackendError::Timeout { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatRole {
    System,
    TherapistSide,
    ClientSide,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::System,
            content: content.into(),
        }
    }

    pub fn therapist(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::TherapistSide,
            content: content.into(),
        }
    }

    pub fn client(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::ClientSide,
            content: content.into(),
        }
    }
}

/// Which party the model speaks for. Decides the wire role of each message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Respondent {
    Therapist,
    Client,
    Judge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_name: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.3,
            max_output_tokens: 1024,
            model_name: String::new(),
            timeout_secs: 60,
            max_retries: 2,
        }
    }
}

impl GenerationParams {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::Configuration(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChatRequest<'a> {
    pub messages: &'a [ChatMessage],
    pub params: &'a GenerationParams,
    pub respondent: Respondent,
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, BackendError>;
}

pub trait EmbeddingBackend: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError>;
}

fn check_messages(messages: &[ChatMessage]) -> Result<(), BackendError> {
    if messages.is_empty() {
        return Err(BackendError::Input("no messages to send".into()));
    }
    if let Some(m) = messages
        .iter()
        .find(|m| m.role != ChatRole::System && m.content.trim().is_empty())
    {
        return Err(BackendError::Input(format!(
            "empty {:?} message",
            m.role
        )));
    }
    Ok(())
}

/// Validates the request and obtains one completion.
pub fn complete(
    backend: &dyn ChatBackend,
    messages: &[ChatMessage],
    params: &GenerationParams,
    respondent: Respondent,
) -> Result<String, BackendError> {
    check_messages(messages)?;
    backend.complete(&ChatRequest {
        messages,
        params,
        respondent,
    })
}

pub fn embed(backend: &dyn EmbeddingBackend, text: &str) -> Result<Vec<f64>, BackendError> {
    if text.trim().is_empty() {
        return Err(BackendError::Input("cannot embed empty text".into()));
    }
    backend.embed(text)
}

// ---------------------------------------------------------------------------
// Scripted chat
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedRequest {
    pub respondent: Respondent,
    pub messages: Vec<ChatMessage>,
}

/// Replays a fixed list of completions in order, once each. Every request
/// is kept so tests can inspect exactly what a party was shown.
#[derive(Debug, Default)]
pub struct ScriptedChat {
    lines: Mutex<VecDeque<String>>,
    consumed: Mutex<usize>,
    requests: Mutex<Vec<RecordedRequest>>,
}

impl ScriptedChat {
    pub fn new<I, S>(lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            lines: Mutex::new(lines.into_iter().map(Into::into).collect()),
            ..Self::default()
        }
    }

    /// Consumes and returns the next scripted line.
    pub fn scripted_next(&self) -> Result<String, BackendError> {
        let mut lines = self.lines.lock().unwrap();
        let mut consumed = self.consumed.lock().unwrap();
        match lines.pop_front() {
            Some(line) => {
                *consumed += 1;
                Ok(line)
            }
            None => Err(BackendError::Exhausted {
                consumed: *consumed,
            }),
        }
    }

    pub fn remaining(&self) -> usize {
        self.lines.lock().unwrap().len()
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl ChatBackend for ScriptedChat {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, BackendError> {
        self.requests.lock().unwrap().push(RecordedRequest {
            respondent: request.respondent,
            messages: request.messages.to_vec(),
        });
        self.scripted_next()
    }
}

// ---------------------------------------------------------------------------
// Fixed embeddings
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPair {
    pub left: String,
    pub right: String,
    pub cosine: f64,
}

/// Deterministic offline embedder. Each text maps to a unit vector seeded
/// from its SHA-256 digest; tabled pairs are built so that their cosine is
/// exactly the tabled value.
#[derive(Debug, Clone)]
pub struct FixedEmbedding {
    dimension: usize,
    table: HashMap<String, Vec<f64>>,
}

impl FixedEmbedding {
    pub const DEFAULT_DIMENSION: usize = 256;

    pub fn new(dimension: usize, pairs: &[SimilarityPair]) -> Result<Self, BackendError> {
        if dimension < 2 {
            return Err(BackendError::Configuration(
                "fixed embedding dimension must be at least 2".into(),
            ));
        }
        let mut table: HashMap<String, Vec<f64>> = HashMap::new();
        for pair in pairs {
            if !(-1.0..=1.0).contains(&pair.cosine) {
                return Err(BackendError::Configuration(format!(
                    "cosine {} for ({:?}, {:?}) is outside [-1, 1]",
                    pair.cosine, pair.left, pair.right
                )));
            }
            if pair.left == pair.right {
                if (pair.cosine - 1.0).abs() > 1e-12 {
                    return Err(BackendError::Configuration(format!(
                        "a text has cosine 1 with itself, table says {}",
                        pair.cosine
                    )));
                }
                continue;
            }
            let left = table.get(&pair.left).cloned();
            let right = table.get(&pair.right).cloned();
            match (left, right) {
                (Some(l), Some(r)) => {
                    let actual = dot(&l, &r);
                    if (actual - pair.cosine).abs() > 1e-9 {
                        return Err(BackendError::Configuration(format!(
                            "conflicting table entries for ({:?}, {:?}): implied {actual}, requested {}",
                            pair.left, pair.right, pair.cosine
                        )));
                    }
                }
                (Some(l), None) => {
                    let v = rotated(&l, &hash_vector(&pair.right, dimension), pair.cosine);
                    table.insert(pair.right.clone(), v);
                }
                (None, Some(r)) => {
                    let v = rotated(&r, &hash_vector(&pair.left, dimension), pair.cosine);
                    table.insert(pair.left.clone(), v);
                }
                (None, None) => {
                    let l = hash_vector(&pair.left, dimension);
                    let v = rotated(&l, &hash_vector(&pair.right, dimension), pair.cosine);
                    table.insert(pair.left.clone(), l);
                    table.insert(pair.right.clone(), v);
                }
            }
        }
        Ok(Self { dimension, table })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }
}

impl EmbeddingBackend for FixedEmbedding {
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        if text.is_empty() {
            return Err(BackendError::Input("cannot embed empty text".into()));
        }
        Ok(self
            .table
            .get(text)
            .cloned()
            .unwrap_or_else(|| hash_vector(text, self.dimension)))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = dot(&v, &v).sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

fn hash_vector(text: &str, dimension: usize) -> Vec<f64> {
    let seed: [u8; 32] = Sha256::digest(text.as_bytes()).into();
    let mut rng = ChaCha8Rng::from_seed(seed);
    normalized((0..dimension).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Unit vector at angle `acos(cosine)` from `base`, rotating toward the
/// component of `direction` orthogonal to `base`.
fn rotated(base: &[f64], direction: &[f64], cosine: f64) -> Vec<f64> {
    let along = dot(base, direction);
    let ortho = normalized(
        direction
            .iter()
            .zip(base)
            .map(|(d, b)| d - along * b)
            .collect(),
    );
    let sine = (1.0 - cosine * cosine).max(0.0).sqrt();
    normalized(
        base.iter()
            .zip(&ortho)
            .map(|(b, o)| cosine * b + sine * o)
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// HTTP transport and rate limiting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Network(String),
}

pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl Default for UreqTransport {
    fn default() -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .new_agent();
        Self { agent }
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        let mut request = self
            .agent
            .post(url)
            .config()
            .timeout_global(Some(timeout))
            .build();
        for (name, value) in headers {
            request = request.header(name.as_str(), value.as_str());
        }
        match request.send_json(body) {
            Ok(mut response) => {
                let status = response.status().as_u16();
                let body = response
                    .body_mut()
                    .read_to_string()
                    .map_err(|e| TransportError::Network(e.to_string()))?;
                Ok(HttpResponse { status, body })
            }
            Err(ureq::Error::Timeout(_)) => Err(TransportError::Timeout),
            Err(e) => Err(TransportError::Network(e.to_string())),
        }
    }
}

/// Token bucket shared by every caller of one endpoint.
#[derive(Debug)]
pub struct RateLimiter {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl RateLimiter {
    pub fn per_minute(requests: u32) -> Self {
        let capacity = f64::from(requests.max(1));
        Self {
            capacity,
            per_second: capacity / 60.0,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    /// Blocks until one request may be sent.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut state = self.state.lock().unwrap();
                let now = Instant::now();
                let refill = now.duration_since(state.1).as_secs_f64() * self.per_second;
                state.0 = (state.0 + refill).min(self.capacity);
                state.1 = now;
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - state.0) / self.per_second)
            };
            std::thread::sleep(wait);
        }
    }
}

/// One limiter per endpoint URL.
#[derive(Debug, Default)]
pub struct RateLimiters {
    by_endpoint: Mutex<HashMap<String, Arc<RateLimiter>>>,
}

impl RateLimiters {
    pub fn limiter_for(&self, endpoint: &str, requests_per_minute: u32) -> Arc<RateLimiter> {
        self.by_endpoint
            .lock()
            .unwrap()
            .entry(endpoint.to_string())
            .or_insert_with(|| Arc::new(RateLimiter::per_minute(requests_per_minute)))
            .clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub initial: Duration,
    pub max: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            initial: Duration::from_millis(500),
            max: Duration::from_secs(30),
        }
    }
}

impl Backoff {
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt);
        self.initial.saturating_mul(factor).min(self.max)
    }
}

struct HttpClient {
    endpoint: String,
    headers: Vec<(String, String)>,
    transport: Arc<dyn HttpTransport>,
    limiter: Option<Arc<RateLimiter>>,
    backoff: Backoff,
}

impl HttpClient {
    /// Sends one JSON body, retrying transient failures up to
    /// `params.max_retries` times. Returns the body and the attempt count.
    fn send(&self, body: &Value, params: &GenerationParams) -> Result<(String, u32), BackendError> {
        let mut last = BackendError::Unavailable {
            attempts: 0,
            message: "no attempt made".into(),
        };
        for attempt in 0..=params.max_retries {
            if attempt > 0 {
                std::thread::sleep(self.backoff.delay(attempt - 1));
            }
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            let attempts = attempt + 1;
            match self
                .transport
                .post_json(&self.endpoint, &self.headers, body, params.timeout())
            {
                Ok(resp) if (200..300).contains(&resp.status) => return Ok((resp.body, attempts)),
                Ok(resp) if resp.status == 429 || resp.status >= 500 => {
                    log::warn!("{} returned HTTP {} (attempt {attempts})", self.endpoint, resp.status);
                    last = BackendError::Unavailable {
                        attempts,
                        message: format!("HTTP {}", resp.status),
                    };
                }
                Ok(resp) => {
                    return Err(BackendError::Configuration(format!(
                        "HTTP {} from {}: {}",
                        resp.status,
                        self.endpoint,
                        resp.body.chars().take(300).collect::<String>()
                    )))
                }
                Err(TransportError::Timeout) => {
                    log::warn!("{} timed out (attempt {attempts})", self.endpoint);
                    last = BackendError::Timeout { attempts };
                }
                Err(TransportError::Network(message)) => {
                    log::warn!("{} unreachable (attempt {attempts}): {message}", self.endpoint);
                    last = BackendError::Unavailable { attempts, message };
                }
            }
        }
        Err(last)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    #[default]
    Openai,
    Anthropic,
}

fn wire_role(role: ChatRole, respondent: Respondent) -> &'static str {
    match (role, respondent) {
        (ChatRole::System, _) => "system",
        (ChatRole::TherapistSide, Respondent::Therapist) => "assistant",
        (ChatRole::ClientSide, Respondent::Client) => "assistant",
        _ => "user",
    }
}

const SESSION_KICKOFF: &str = "(The session begins.)";

fn openai_chat_body(request: &ChatRequest<'_>) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| json!({"role": wire_role(m.role, request.respondent), "content": m.content}))
        .collect();
    json!({
        "model": request.params.model_name,
        "messages": messages,
        "temperature": request.params.temperature,
        "max_tokens": request.params.max_output_tokens,
    })
}

fn anthropic_chat_body(request: &ChatRequest<'_>) -> Value {
    let system: Vec<&str> = request
        .messages
        .iter()
        .filter(|m| m.role == ChatRole::System)
        .map(|m| m.content.as_str())
        .collect();
    let mut turns: Vec<(&'static str, String)> = Vec::new();
    for m in request.messages.iter().filter(|m| m.role != ChatRole::System) {
        let role = wire_role(m.role, request.respondent);
        match turns.last_mut() {
            Some((last, text)) if *last == role => {
                text.push_str("\n\n");
                text.push_str(&m.content);
            }
            _ => turns.push((role, m.content.clone())),
        }
    }
    let mut system_text = system.join("\n\n");
    if turns.is_empty() && request.respondent == Respondent::Judge {
        turns.push(("user", std::mem::take(&mut system_text)));
    }
    if turns.first().is_none_or(|(role, _)| *role != "user") {
        turns.insert(0, ("user", SESSION_KICKOFF.to_string()));
    }
    let messages: Vec<Value> = turns
        .into_iter()
        .map(|(role, content)| json!({"role": role, "content": content}))
        .collect();
    let mut body = json!({
        "model": request.params.model_name,
        "messages": messages,
        "temperature": request.params.temperature,
        "max_tokens": request.params.max_output_tokens,
    });
    if !system_text.is_empty() {
        body["system"] = Value::String(system_text);
    }
    body
}

fn parse_chat_response(provider: Provider, body: &str) -> Result<(String, Option<(u64, u64)>), BackendError> {
    let value: Value = serde_json::from_str(body)
        .map_err(|e| BackendError::Protocol(format!("response is not JSON: {e}")))?;
    let (text, usage) = match provider {
        Provider::Openai => (
            value["choices"][0]["message"]["content"].as_str(),
            value["usage"]["prompt_tokens"]
                .as_u64()
                .zip(value["usage"]["completion_tokens"].as_u64()),
        ),
        Provider::Anthropic => (
            value["content"]
                .as_array()
                .and_then(|blocks| blocks.iter().find(|b| b["type"] == "text"))
                .and_then(|b| b["text"].as_str()),
            value["usage"]["input_tokens"]
                .as_u64()
                .zip(value["usage"]["output_tokens"].as_u64()),
        ),
    };
    match text {
        Some(t) if !t.trim().is_empty() => Ok((t.to_string(), usage)),
        _ => Err(BackendError::Protocol("response carries no completion text".into())),
    }
}

pub struct RemoteChat {
    provider: Provider,
    http: HttpClient,
}

impl RemoteChat {
    pub fn new(
        provider: Provider,
        endpoint: impl Into<String>,
        api_key: &str,
        transport: Arc<dyn HttpTransport>,
        limiter: Option<Arc<RateLimiter>>,
    ) -> Self {
        let headers = match provider {
            Provider::Openai => vec![("Authorization".into(), format!("Bearer {api_key}"))],
            Provider::Anthropic => vec![
                ("x-api-key".into(), api_key.to_string()),
                ("anthropic-version".into(), "2023-06-01".into()),
            ],
        };
        Self {
            provider,
            http: HttpClient {
                endpoint: endpoint.into(),
                headers,
                transport,
                limiter,
                backoff: Backoff::default(),
            },
        }
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.http.backoff = backoff;
        self
    }
}

impl ChatBackend for RemoteChat {
    fn complete(&self, request: &ChatRequest<'_>) -> Result<String, BackendError> {
        check_messages(request.messages)?;
        request.params.validate()?;
        let body = match self.provider {
            Provider::Openai => openai_chat_body(request),
            Provider::Anthropic => anthropic_chat_body(request),
        };
        let started = Instant::now();
        let (raw, attempts) = self.http.send(&body, request.params)?;
        let (text, usage) = parse_chat_response(self.provider, &raw)?;
        let latency = started.elapsed().as_millis();
        match usage {
            Some((input, output)) => log::info!(
                "chat {} model={} attempts={attempts} latency_ms={latency} input_tokens={input} output_tokens={output}",
                self.http.endpoint, request.params.model_name
            ),
            None => log::info!(
                "chat {} model={} attempts={attempts} latency_ms={latency}",
                self.http.endpoint, request.params.model_name
            ),
        }
        Ok(text)
    }
}

/// OpenAI-style `/embeddings` endpoint.
pub struct RemoteEmbedding {
    http: HttpClient,
    params: GenerationParams,
    dimension: Mutex<Option<usize>>,
}

impl RemoteEmbedding {
    pub fn new(
        endpoint: impl Into<String>,
        api_key: &str,
        params: GenerationParams,
        transport: Arc<dyn HttpTransport>,
        limiter: Option<Arc<RateLimiter>>,
    ) -> Self {
        Self {
            http: HttpClient {
                endpoint: endpoint.into(),
                headers: vec![("Authorization".into(), format!("Bearer {api_key}"))],
                transport,
                limiter,
                backoff: Backoff::default(),
            },
            params,
            dimension: Mutex::new(None),
        }
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.http.backoff = backoff;
        self
    }
}

impl EmbeddingBackend for RemoteEmbedding {
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        if text.trim().is_empty() {
            return Err(BackendError::Input("cannot embed empty text".into()));
        }
        let body = json!({"model": self.params.model_name, "input": text});
        let (raw, _) = self.http.send(&body, &self.params)?;
        let value: Value = serde_json::from_str(&raw)
            .map_err(|e| BackendError::Protocol(format!("response is not JSON: {e}")))?;
        let vector: Vec<f64> = value["data"][0]["embedding"]
            .as_array()
            .ok_or_else(|| BackendError::Protocol("response carries no embedding".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| BackendError::Protocol("non-numeric embedding".into())))
            .collect::<Result<_, _>>()?;
        let mut dim = self.dimension.lock().unwrap();
        match *dim {
            Some(d) if d != vector.len() => {
                return Err(BackendError::Protocol(format!(
                    "embedding dimension changed from {d} to {}",
                    vector.len()
                )))
            }
            None => *dim = Some(vector.len()),
            _ => {}
        }
        Ok(vector)
    }
}

// ---------------------------------------------------------------------------
// Descriptors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    RemoteChat,
    RemoteEmbedding,
    ScriptedChat,
    FixedEmbedding,
}

/// Config-facing description of a backend. Credentials are only ever read
/// from the environment variable named by `credentials_ref`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default)]
    pub provider: Provider,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credentials_ref: Option<String>,
    #[serde(default)]
    pub params: GenerationParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requests_per_minute: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub script: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub table: Vec<SimilarityPair>,
}

impl BackendDescriptor {
    fn bare(kind: BackendKind) -> Self {
        Self {
            kind,
            label: None,
            provider: Provider::default(),
            endpoint: None,
            credentials_ref: None,
            params: GenerationParams::default(),
            requests_per_minute: None,
            script: Vec::new(),
            script_file: None,
            dimension: None,
            table: Vec::new(),
        }
    }

    pub fn scripted<I, S>(lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut d = Self::bare(BackendKind::ScriptedChat);
        d.script = lines.into_iter().map(Into::into).collect();
        d
    }

    pub fn fixed_embedding(dimension: usize, table: Vec<SimilarityPair>) -> Self {
        let mut d = Self::bare(BackendKind::FixedEmbedding);
        d.dimension = Some(dimension);
        d.table = table;
        d
    }

    pub fn remote_chat(provider: Provider, endpoint: &str, credentials_ref: &str, model: &str) -> Self {
        let mut d = Self::bare(BackendKind::RemoteChat);
        d.provider = provider;
        d.endpoint = Some(endpoint.into());
        d.credentials_ref = Some(credentials_ref.into());
        d.params.model_name = model.into();
        d
    }

    pub fn remote_embedding(endpoint: &str, credentials_ref: &str, model: &str) -> Self {
        let mut d = Self::bare(BackendKind::RemoteEmbedding);
        d.endpoint = Some(endpoint.into());
        d.credentials_ref = Some(credentials_ref.into());
        d.params.model_name = model.into();
        d
    }

    pub fn is_chat(&self) -> bool {
        matches!(self.kind, BackendKind::RemoteChat | BackendKind::ScriptedChat)
    }

    /// Human-readable name used for report rows.
    pub fn display_label(&self) -> String {
        if let Some(label) = &self.label {
            return label.clone();
        }
        if !self.params.model_name.is_empty() {
            return self.params.model_name.clone();
        }
        match self.kind {
            BackendKind::ScriptedChat => "scripted".into(),
            BackendKind::FixedEmbedding => "fixed".into(),
            BackendKind::RemoteChat | BackendKind::RemoteEmbedding => "remote".into(),
        }
    }

    fn remote_target(&self) -> Result<(String, String), BackendError> {
        let endpoint = self
            .endpoint
            .clone()
            .ok_or_else(|| BackendError::Configuration("remote backend needs `endpoint`".into()))?;
        let var = self.credentials_ref.clone().ok_or_else(|| {
            BackendError::Configuration("remote backend needs `credentials_ref`".into())
        })?;
        let key = std::env::var(&var).ok().filter(|k| !k.trim().is_empty()).ok_or_else(|| {
            BackendError::Configuration(format!("environment variable `{var}` is not set"))
        })?;
        Ok((endpoint, key))
    }

    /// Checks everything that can be checked without sending a request.
    pub fn preflight(&self) -> Result<(), BackendError> {
        self.params.validate()?;
        match self.kind {
            BackendKind::RemoteChat | BackendKind::RemoteEmbedding => self.remote_target().map(|_| ()),
            BackendKind::ScriptedChat => self.script_lines().map(|_| ()),
            BackendKind::FixedEmbedding => {
                FixedEmbedding::new(self.dimension.unwrap_or(FixedEmbedding::DEFAULT_DIMENSION), &self.table)
                    .map(|_| ())
            }
        }
    }

    fn script_lines(&self) -> Result<Vec<String>, BackendError> {
        let mut lines = self.script.clone();
        if let Some(path) = &self.script_file {
            let text = std::fs::read_to_string(path).map_err(|e| {
                BackendError::Configuration(format!("cannot read script {}: {e}", path.display()))
            })?;
            let parsed: Vec<String> = serde_json::from_str(&text).map_err(|e| {
                BackendError::Configuration(format!(
                    "script {} must be a JSON array of strings: {e}",
                    path.display()
                ))
            })?;
            lines.extend(parsed);
        }
        Ok(lines)
    }
}

/// Builds live backends from descriptors. Scripted backends get a fresh
/// script on every build, so each session replays from the first line.
#[derive(Clone)]
pub struct BackendFactory {
    transport: Arc<dyn HttpTransport>,
    limiters: Arc<RateLimiters>,
}

impl Default for BackendFactory {
    fn default() -> Self {
        Self::new(Arc::new(UreqTransport::default()))
    }
}

impl BackendFactory {
    pub fn new(transport: Arc<dyn HttpTransport>) -> Self {
        Self {
            transport,
            limiters: Arc::new(RateLimiters::default()),
        }
    }

    fn limiter(&self, descriptor: &BackendDescriptor, endpoint: &str) -> Option<Arc<RateLimiter>> {
        descriptor
            .requests_per_minute
            .map(|rpm| self.limiters.limiter_for(endpoint, rpm))
    }

    pub fn chat(&self, descriptor: &BackendDescriptor) -> Result<Arc<dyn ChatBackend>, BackendError> {
        descriptor.params.validate()?;
        match descriptor.kind {
            BackendKind::ScriptedChat => Ok(Arc::new(ScriptedChat::new(descriptor.script_lines()?))),
            BackendKind::RemoteChat => {
                let (endpoint, key) = descriptor.remote_target()?;
                let limiter = self.limiter(descriptor, &endpoint);
                Ok(Arc::new(RemoteChat::new(
                    descriptor.provider,
                    endpoint,
                    &key,
                    self.transport.clone(),
                    limiter,
                )))
            }
            other => Err(BackendError::Configuration(format!(
                "{other:?} is not a chat backend"
            ))),
        }
    }

    pub fn embedding(
        &self,
        descriptor: &BackendDescriptor,
    ) -> Result<Arc<dyn EmbeddingBackend>, BackendError> {
        match descriptor.kind {
            BackendKind::FixedEmbedding => Ok(Arc::new(FixedEmbedding::new(
                descriptor.dimension.unwrap_or(FixedEmbedding::DEFAULT_DIMENSION),
                &descriptor.table,
            )?)),
            BackendKind::RemoteEmbedding => {
                let (endpoint, key) = descriptor.remote_target()?;
                let limiter = self.limiter(descriptor, &endpoint);
                Ok(Arc::new(RemoteEmbedding::new(
                    endpoint,
                    &key,
                    descriptor.params.clone(),
                    self.transport.clone(),
                    limiter,
                )))
            }
            other => Err(BackendError::Configuration(format!(
                "{other:?} is not an embedding backend"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct MockTransport {
        responses: Mutex<VecDeque<Result<HttpResponse, TransportError>>>,
        calls: AtomicUsize,
        bodies: Mutex<Vec<Value>>,
    }

    impl MockTransport {
        fn new(responses: Vec<Result<HttpResponse, TransportError>>) -> Arc<Self> {
            Arc::new(Self {
                responses: Mutex::new(responses.into()),
                calls: AtomicUsize::new(0),
                bodies: Mutex::new(Vec::new()),
            })
        }
    }

    impl HttpTransport for MockTransport {
        fn post_json(
            &self,
            _url: &str,
            _headers: &[(String, String)],
            body: &Value,
            _timeout: Duration,
        ) -> Result<HttpResponse, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.bodies.lock().unwrap().push(body.clone());
            self.responses
                .lock()
                .unwrap()
                .pop_front()
                .unwrap_or(Err(TransportError::Network("mock drained".into())))
        }
    }

    fn ok(body: &str) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse {
            status: 200,
            body: body.into(),
        })
    }

    fn status(code: u16) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse {
            status: code,
            body: "{}".into(),
        })
    }

    fn chat(transport: Arc<MockTransport>, provider: Provider) -> RemoteChat {
        RemoteChat::new(provider, "http://mock/v1/chat", "k", transport, None).with_backoff(Backoff {
            initial: Duration::ZERO,
            max: Duration::ZERO,
        })
    }

    const OPENAI_OK: &str =
        r#"{"choices":[{"message":{"role":"assistant","content":"hello"}}],"usage":{"prompt_tokens":3,"completion_tokens":1}}"#;

    #[test]
    fn scripted_backend_replays_then_exhausts() {
        let backend = ScriptedChat::new(["Hi. Um, I guess I'm just here because... well, I don't really know."]);
        let params = GenerationParams::default();
        let msgs = [ChatMessage::system("be a client")];
        let out = complete(&backend, &msgs, &params, Respondent::Client).unwrap();
        assert!(out.contains("I guess I'm just here"));
        assert_eq!(
            complete(&backend, &msgs, &params, Respondent::Client),
            Err(BackendError::Exhausted { consumed: 1 })
        );
    }

    #[test]
    fn scripted_next_order_and_empty() {
        let backend = ScriptedChat::new(["a", "b"]);
        assert_eq!(backend.scripted_next().unwrap(), "a");
        assert_eq!(backend.scripted_next().unwrap(), "b");
        assert!(backend.scripted_next().is_err());
        assert!(ScriptedChat::new(Vec::<String>::new()).scripted_next().is_err());
    }

    #[test]
    fn interleaved_consumers_get_each_line_once() {
        let backend = Arc::new(ScriptedChat::new((0..200).map(|i| i.to_string())));
        let handles: Vec<_> = (0..4)
            .map(|_| {
                let b = backend.clone();
                std::thread::spawn(move || {
                    let mut got = Vec::new();
                    while let Ok(line) = b.scripted_next() {
                        got.push(line.parse::<u32>().unwrap());
                    }
                    got
                })
            })
            .collect();
        let mut all: Vec<u32> = Vec::new();
        for h in handles {
            let got = h.join().unwrap();
            assert!(got.windows(2).all(|w| w[0] < w[1]), "per-consumer order");
            all.extend(got);
        }
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn empty_messages_rejected() {
        let backend = ScriptedChat::new(["x"]);
        let params = GenerationParams::default();
        assert!(matches!(
            complete(&backend, &[], &params, Respondent::Judge),
            Err(BackendError::Input(_))
        ));
        assert!(matches!(
            complete(&backend, &[ChatMessage::client("  ")], &params, Respondent::Therapist),
            Err(BackendError::Input(_))
        ));
        assert_eq!(backend.remaining(), 1);
    }

    #[test]
    fn retries_transient_failures_then_succeeds() {
        let transport = MockTransport::new(vec![status(503), Err(TransportError::Timeout), ok(OPENAI_OK)]);
        let backend = chat(transport.clone(), Provider::Openai);
        let params = GenerationParams::default();
        let out = complete(&backend, &[ChatMessage::system("s")], &params, Respondent::Judge).unwrap();
        assert_eq!(out, "hello");
        assert_eq!(transport.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retry_bound_is_one_plus_max_retries() {
        for max_retries in 0..4u32 {
            let transport = MockTransport::new((0..10).map(|_| status(500)).collect());
            let backend = chat(transport.clone(), Provider::Openai);
            let params = GenerationParams {
                max_retries,
                ..GenerationParams::default()
            };
            let err = complete(&backend, &[ChatMessage::system("s")], &params, Respondent::Judge).unwrap_err();
            assert_eq!(
                err,
                BackendError::Unavailable {
                    attempts: max_retries + 1,
                    message: "HTTP 500".into()
                }
            );
            assert_eq!(transport.calls.load(Ordering::SeqCst), max_retries as usize + 1);
        }
    }

    #[test]
    fn client_errors_are_not_retried() {
        let transport = MockTransport::new(vec![status(401), ok(OPENAI_OK)]);
        let backend = chat(transport.clone(), Provider::Openai);
        let err = complete(
            &backend,
            &[ChatMessage::system("s")],
            &GenerationParams::default(),
            Respondent::Judge,
        )
        .unwrap_err();
        assert!(matches!(err, BackendError::Configuration(_)));
        assert_eq!(transport.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn final_timeout_reports_timeout() {
        let transport = MockTransport::new(vec![Err(TransportError::Timeout); 3]);
        let backend = chat(transport, Provider::Openai);
        let err = complete(
            &backend,
            &[ChatMessage::system("s")],
            &GenerationParams::default(),
            Respondent::Judge,
        )
        .unwrap_err();
        assert_eq!(err, BackendError::Timeout { attempts: 3 });
    }

    #[test]
    fn openai_roles_follow_respondent() {
        let transport = MockTransport::new(vec![ok(OPENAI_OK), ok(OPENAI_OK)]);
        let backend = chat(transport.clone(), Provider::Openai);
        let msgs = [
            ChatMessage::system("sys"),
            ChatMessage::therapist("t"),
            ChatMessage::client("c"),
        ];
        let params = GenerationParams::default();
        complete(&backend, &msgs, &params, Respondent::Therapist).unwrap();
        complete(&backend, &msgs, &params, Respondent::Client).unwrap();
        let bodies = transport.bodies.lock().unwrap();
        let roles = |b: &Value| {
            b["messages"]
                .as_array()
                .unwrap()
                .iter()
                .map(|m| m["role"].as_str().unwrap().to_string())
                .collect::<Vec<_>>()
        };
        assert_eq!(roles(&bodies[0]), ["system", "assistant", "user"]);
        assert_eq!(roles(&bodies[1]), ["system", "user", "assistant"]);
        assert_eq!(bodies[0]["temperature"], 0.3);
    }

    #[test]
    fn anthropic_body_starts_with_user_and_lifts_system() {
        let reply = r#"{"content":[{"type":"text","text":"hi"}],"usage":{"input_tokens":1,"output_tokens":1}}"#;
        let transport = MockTransport::new(vec![ok(reply), ok(reply)]);
        let backend = chat(transport.clone(), Provider::Anthropic);
        let params = GenerationParams::default();
        complete(&backend, &[ChatMessage::system("be a therapist")], &params, Respondent::Therapist).unwrap();
        complete(&backend, &[ChatMessage::system("rate this")], &params, Respondent::Judge).unwrap();
        let bodies = transport.bodies.lock().unwrap();
        assert_eq!(bodies[0]["system"], "be a therapist");
        assert_eq!(bodies[0]["messages"][0]["role"], "user");
        assert!(bodies[1].get("system").is_none());
        assert_eq!(bodies[1]["messages"][0]["content"], "rate this");
    }

    #[test]
    fn missing_credentials_is_configuration_error() {
        let d = BackendDescriptor::remote_chat(
            Provider::Openai,
            "https://example.invalid/v1/chat/completions",
            "COGNISIM_TEST_SURELY_UNSET_KEY",
            "gpt-4o-mini",
        );
        assert!(matches!(d.preflight(), Err(BackendError::Configuration(_))));
        assert!(BackendFactory::default().chat(&d).is_err());
        let mut no_ref = d.clone();
        no_ref.credentials_ref = None;
        assert!(matches!(no_ref.preflight(), Err(BackendError::Configuration(_))));
    }

    #[test]
    fn fixed_embedding_is_deterministic_and_unit() {
        let e = FixedEmbedding::new(64, &[]).unwrap();
        let a = e.embed("I am out of control.").unwrap();
        assert_eq!(a, e.embed("I am out of control.").unwrap());
        assert_eq!(a.len(), 64);
        assert!((dot(&a, &a) - 1.0).abs() < 1e-12);
        assert!(embed(&e, "").is_err());
    }

    #[test]
    fn fixed_embedding_honours_table() {
        // Oracle: with unit vectors, cosine is the plain dot product.
        let pairs = vec![
            SimilarityPair {
                left: "I am out of control.".into(),
                right: "I feel out of control".into(),
                cosine: 0.9,
            },
            SimilarityPair {
                left: "I am out of control.".into(),
                right: "I can't manage anything".into(),
                cosine: -0.25,
            },
        ];
        let e = FixedEmbedding::new(128, &pairs).unwrap();
        let a = e.embed("I am out of control.").unwrap();
        let b = e.embed("I feel out of control").unwrap();
        let c = e.embed("I can't manage anything").unwrap();
        assert!((dot(&a, &b) - 0.9).abs() < 1e-9);
        assert!((dot(&a, &c) + 0.25).abs() < 1e-9);
        assert!((dot(&b, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conflicting_table_is_rejected() {
        let pairs = vec![
            SimilarityPair { left: "a".into(), right: "b".into(), cosine: 0.9 },
            SimilarityPair { left: "b".into(), right: "a".into(), cosine: 0.5 },
        ];
        assert!(FixedEmbedding::new(16, &pairs).is_err());
        let bad = vec![SimilarityPair { left: "a".into(), right: "b".into(), cosine: 1.5 }];
        assert!(FixedEmbedding::new(16, &bad).is_err());
    }

    #[test]
    fn remote_embedding_enforces_dimension() {
        let transport = MockTransport::new(vec![
            ok(r#"{"data":[{"embedding":[0.1,0.2,0.3]}]}"#),
            ok(r#"{"data":[{"embedding":[0.1,0.2]}]}"#),
        ]);
        let e = RemoteEmbedding::new("http://mock/emb", "k", GenerationParams::default(), transport, None);
        assert_eq!(e.embed("x").unwrap().len(), 3);
        assert!(matches!(e.embed("y"), Err(BackendError::Protocol(_))));
    }

    #[test]
    fn rate_limiter_allows_burst_capacity() {
        let limiter = RateLimiter::per_minute(6000);
        let start = Instant::now();
        for _ in 0..50 {
            limiter.acquire();
        }
        assert!(start.elapsed() < Duration::from_millis(200));
        let registry = RateLimiters::default();
        let a = registry.limiter_for("http://x", 10);
        let b = registry.limiter_for("http://x", 99);
        assert!(Arc::ptr_eq(&a, &b));
    }

    #[test]
    fn backoff_grows_and_caps() {
        let b = Backoff { initial: Duration::from_millis(100), max: Duration::from_millis(350) };
        assert_eq!(b.delay(0), Duration::from_millis(100));
        assert_eq!(b.delay(1), Duration::from_millis(200));
        assert_eq!(b.delay(2), Duration::from_millis(350));
    }
}
