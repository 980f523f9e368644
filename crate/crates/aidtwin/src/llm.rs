//! Chat-completion transport for the remote planner, plus transcript recording
//! and replay.
//!
//! A transcript is a JSON-lines file with one exchange per line:
//! `{"request": "<request body>", "response": "<response body>"}`. Both bodies are
//! stored as the exact strings sent and received. When replaying, the recorded
//! response body goes through the same parser as a live one; `request` may be
//! omitted in hand-written fixtures, and when present it is checked only in
//! strict mode.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Duration;

use aidtwin_core::planner::{ChatMessage, ChatModel};
use serde::{Deserialize, Serialize};

pub const DEFAULT_TOKEN_ENV: &str = "AIDTWIN_LLM_TOKEN";

#[derive(Debug, Clone, PartialEq)]
pub struct LlmConfig {
    /// Base URL of an OpenAI-compatible API; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token (unset: no auth header).
    pub token_env: String,
    pub timeout: Duration,
    /// Extra attempts after a failed request.
    pub retries: u32,
    pub temperature: f64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            token_env: DEFAULT_TOKEN_ENV.into(),
            timeout: Duration::from_secs(60),
            retries: 2,
            temperature: 0.0,
        }
    }
}

#[derive(Serialize)]
struct RequestBody<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
}

pub fn request_body(model: &str, messages: &[ChatMessage], temperature: f64) -> String {
    serde_json::to_string(&RequestBody { model, messages, temperature }).expect("plain data serializes")
}

#[derive(Deserialize)]
struct ResponseBody {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Assistant text of a chat-completion response body.
pub fn response_text(body: &str) -> Result<String, String> {
    let parsed: ResponseBody = serde_json::from_str(body).map_err(|e| format!("malformed completion response: {e}"))?;
    let first = parsed.choices.into_iter().next().ok_or("completion response has no choices")?;
    Ok(first.message.content.unwrap_or_default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<String>,
    pub response: String,
}

/// Appends exchanges to a transcript file as they happen.
pub struct TranscriptRecorder {
    file: File,
}

impl TranscriptRecorder {
    pub fn create(path: &Path) -> std::io::Result<Self> {
        Ok(Self { file: File::create(path)? })
    }

    pub fn record(&mut self, request: &str, response: &str) -> std::io::Result<()> {
        let line = serde_json::to_string(&Exchange { request: Some(request.into()), response: response.into() })?;
        writeln!(self.file, "{line}")?;
        self.file.flush()
    }
}

pub fn read_transcript(path: &Path) -> Result<Vec<Exchange>, String> {
    let file = File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| format!("{}: {e}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("{} line {}: {e}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Live endpoint client.
pub struct HttpChatModel {
    config: LlmConfig,
    agent: ureq::Agent,
    token: Option<String>,
    recorder: Option<TranscriptRecorder>,
}

impl HttpChatModel {
    pub fn new(config: LlmConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let token = std::env::var(&config.token_env).ok().filter(|t| !t.is_empty());
        Self { config, agent, token, recorder: None }
    }

    pub fn with_recorder(mut self, recorder: TranscriptRecorder) -> Self {
        self.recorder = Some(recorder);
        self
    }

    fn send_once(&self, url: &str, body: &str) -> Result<String, (bool, String)> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        let mut resp = req.send(body.as_bytes()).map_err(|e| (true, format!("request to {url} failed: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| (true, format!("reading response: {e}")))?;
        match status {
            200..=299 => Ok(text),
            429 | 500..=599 => Err((true, format!("endpoint returned {status}"))),
            _ => Err((false, format!("endpoint returned {status}: {}", text.chars().take(200).collect::<String>()))),
        }
    }
}

impl ChatModel for HttpChatModel {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, String> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = request_body(&self.config.model, messages, self.config.temperature);
        let mut attempt = 0;
        let raw = loop {
            match self.send_once(&url, &body) {
                Ok(text) => break text,
                Err((retryable, msg)) => {
                    if !retryable || attempt >= self.config.retries {
                        return Err(format!("{msg} (after {} attempt(s))", attempt + 1));
                    }
                    std::thread::sleep(Duration::from_millis(500 << attempt.min(6)));
                    attempt += 1;
                }
            }
        };
        if let Some(rec) = self.recorder.as_mut() {
            rec.record(&body, &raw).map_err(|e| format!("writing transcript: {e}"))?;
        }
        response_text(&raw)
    }
}

/// Plays a recorded transcript back, one exchange per request.
pub struct ReplayChatModel {
    exchanges: Vec<Exchange>,
    next: usize,
    /// Model name and temperature used to rebuild request bodies in strict mode.
    request: Option<(String, f64)>,
}

impl ReplayChatModel {
    pub fn new(exchanges: Vec<Exchange>) -> Self {
        Self { exchanges, next: 0, request: None }
    }

    pub fn open(path: &Path) -> Result<Self, String> {
        read_transcript(path).map(Self::new)
    }

    /// Fails any request whose body differs from a recorded `request`.
    pub fn strict(mut self, model: &str, temperature: f64) -> Self {
        self.request = Some((model.into(), temperature));
        self
    }

    pub fn remaining(&self) -> usize {
        self.exchanges.len() - self.next
    }
}

impl ChatModel for ReplayChatModel {
    fn complete(&mut self, messages: &[ChatMessage]) -> Result<String, String> {
        let Some(ex) = self.exchanges.get(self.next) else {
            return Err(format!("transcript exhausted after {} exchange(s)", self.exchanges.len()));
        };
        self.next += 1;
        if let (Some((model, temperature)), Some(recorded)) = (&self.request, &ex.request) {
            if request_body(model, messages, *temperature) != *recorded {
                return Err(format!("request {} does not match the transcript", self.next));
            }
        }
        response_text(&ex.response)
    }
}
