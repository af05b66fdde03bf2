//! Minimal blocking chat-completions client for OpenAI-compatible endpoints.
//!
//! Requests are built by a pure function of the configuration and messages,
//! retried with exponential backoff on 429/5xx, and capped at
//! `max_in_flight` concurrent requests per client handle. The API key is read
//! from the configured environment variable at request time and never logged.

pub mod mock;

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout_ms")]
    pub request_timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    /// First backoff delay; later delays double, with +/-50% jitter.
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
}

fn default_max_tokens() -> u32 {
    1024
}
fn default_api_key_env() -> String {
    "OPENAI_API_KEY".to_string()
}
fn default_timeout_ms() -> u64 {
    120_000
}
fn default_max_retries() -> u32 {
    5
}
fn default_max_in_flight() -> usize {
    4
}
fn default_backoff_ms() -> u64 {
    1000
}

impl ModelConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        ModelConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            api_key_env: default_api_key_env(),
            request_timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            max_in_flight: default_max_in_flight(),
            backoff_base_ms: default_backoff_ms(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(format!("temperature {} outside [0, 2]", self.temperature));
        }
        if self.max_retries > 10 {
            return Err(format!("max_retries {} exceeds 10", self.max_retries));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be positive".into());
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(format!("base_url {:?} is not an http(s) URL", self.base_url));
        }
        Ok(())
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTranscriptEntry {
    pub request_body_hash: String,
    pub response_body: String,
    pub latency_ms: u64,
    pub http_status: u16,
    pub attempt: u32,
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("conversation must alternate and end on a user turn ({users} user, {assistants} assistant)")]
    BadConversation { users: usize, assistants: usize },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("still rate limited after {attempts} attempts")]
    RateLimitedExhausted { attempts: u32 },
    #[error("HTTP {status} after {attempts} attempts: {body}")]
    HttpStatus { status: u16, attempts: u32, body: String },
    #[error("response has no assistant content: {body}")]
    MalformedResponse { body: String },
}

/// Orders messages as system, then alternating user/assistant, ending on a user turn.
pub fn build_messages(
    system: &str,
    user_turns: &[String],
    assistant_turns: &[String],
) -> Result<Vec<ChatMessage>, ClientError> {
    if user_turns.is_empty() || assistant_turns.len() + 1 != user_turns.len() {
        return Err(ClientError::BadConversation {
            users: user_turns.len(),
            assistants: assistant_turns.len(),
        });
    }
    let mut messages = vec![ChatMessage {
        role: Role::System,
        content: system.to_string(),
    }];
    for (i, u) in user_turns.iter().enumerate() {
        messages.push(ChatMessage {
            role: Role::User,
            content: u.clone(),
        });
        if let Some(a) = assistant_turns.get(i) {
            messages.push(ChatMessage {
                role: Role::Assistant,
                content: a.clone(),
            });
        }
    }
    Ok(messages)
}

/// Request body; a pure function of the config and messages.
pub fn request_body(config: &ModelConfig, messages: &[ChatMessage]) -> serde_json::Value {
    json!({
        "model": config.model_name,
        "temperature": config.temperature,
        "max_tokens": config.max_tokens,
        "messages": messages,
    })
}

pub fn body_hash(body: &str) -> String {
    hex::encode(Sha256::digest(body.as_bytes()))
}

/// Extracts `choices[0].message.content`.
pub fn extract_content(body: &str) -> Result<String, ClientError> {
    let malformed = || ClientError::MalformedResponse { body: body.to_string() };
    let v: serde_json::Value = serde_json::from_str(body).map_err(|_| malformed())?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(malformed)
}

/// Counting gate bounding concurrent requests.
#[derive(Debug)]
struct InFlightGate {
    limit: usize,
    current: Mutex<usize>,
    cv: Condvar,
}

struct GateGuard<'a>(&'a InFlightGate);

impl InFlightGate {
    fn new(limit: usize) -> Self {
        InFlightGate {
            limit,
            current: Mutex::new(0),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut n = self.current.lock().unwrap();
        while *n >= self.limit {
            n = self.cv.wait(n).unwrap();
        }
        *n += 1;
        GateGuard(self)
    }
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut n = self.0.current.lock().unwrap();
        *n -= 1;
        self.0.cv.notify_one();
    }
}

/// Shareable client handle; safe to use from many sessions at once.
pub struct ChatClient {
    config: ModelConfig,
    http: ureq::Agent,
    gate: InFlightGate,
    transcript: Mutex<Vec<ChatTranscriptEntry>>,
}

impl std::fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ChatClient").field("config", &self.config).finish_non_exhaustive()
    }
}

impl ChatClient {
    pub fn new(config: ModelConfig) -> Result<Self, ClientError> {
        config.validate().map_err(ClientError::Config)?;
        let http: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.request_timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(ChatClient {
            gate: InFlightGate::new(config.max_in_flight),
            config,
            http,
            transcript: Mutex::new(Vec::new()),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every HTTP exchange so far, in completion order.
    pub fn transcript(&self) -> Vec<ChatTranscriptEntry> {
        self.transcript.lock().unwrap().clone()
    }

    pub fn take_transcript(&self) -> Vec<ChatTranscriptEntry> {
        std::mem::take(&mut *self.transcript.lock().unwrap())
    }

    fn backoff(&self, retry: u32) -> Duration {
        let base = self.config.backoff_base_ms as f64 * 2f64.powi(retry as i32);
        let jitter = rand::thread_rng().gen_range(0.5..1.5);
        Duration::from_millis((base * jitter) as u64)
    }

    /// Sends one conversation and returns the assistant text.
    pub fn chat(&self, system: &str, user_turns: &[String], assistant_turns: &[String]) -> Result<String, ClientError> {
        let messages = build_messages(system, user_turns, assistant_turns)?;
        let body = request_body(&self.config, &messages).to_string();
        let hash = body_hash(&body);
        let url = self.config.endpoint();
        let api_key = std::env::var(&self.config.api_key_env).ok();
        let attempts = self.config.max_retries + 1;

        for attempt in 1..=attempts {
            let started = Instant::now();
            let result = {
                let _slot = self.gate.acquire();
                let mut req = self.http.post(&url).header("Content-Type", "application/json");
                if let Some(key) = api_key.as_deref() {
                    req = req.header("Authorization", &format!("Bearer {key}"));
                }
                req.send(body.as_str())
                    .and_then(|mut resp| {
                        let status = resp.status().as_u16();
                        resp.body_mut().read_to_string().map(|text| (status, text))
                    })
            };
            let (status, text) = result.map_err(|e| ClientError::Transport(e.to_string()))?;
            self.transcript.lock().unwrap().push(ChatTranscriptEntry {
                request_body_hash: hash.clone(),
                response_body: text.clone(),
                latency_ms: started.elapsed().as_millis() as u64,
                http_status: status,
                attempt,
            });
            let retryable = status == 429 || (500..600).contains(&status);
            if (200..300).contains(&status) {
                return extract_content(&text);
            }
            if !retryable {
                return Err(ClientError::HttpStatus { status, attempts: attempt, body: text });
            }
            if attempt == attempts {
                return Err(if status == 429 {
                    ClientError::RateLimitedExhausted { attempts }
                } else {
                    ClientError::HttpStatus { status, attempts, body: text }
                });
            }
            std::thread::sleep(self.backoff(attempt - 1));
        }
        unreachable!("loop returns on the final attempt")
    }
}
