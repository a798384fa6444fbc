//! Chat-completions client.

use std::env;
use std::thread;
use std::time::{Duration, Instant};

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Backend, FinishReason, GenerationRequest, GenerationResult, Usage};
use crate::error::{Error, Result};

pub const ENV_API_KEY: &str = "LMRC_API_KEY";
pub const ENV_API_BASE: &str = "LMRC_API_BASE";
pub const ENV_MODEL: &str = "LMRC_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    /// Base URL; `/chat/completions` is appended.
    pub api_base: String,
    pub model: String,
    /// Read from the environment when absent; never serialized.
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub system_prompt: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            api_base: "http://localhost:8000/v1".into(),
            model: "default".into(),
            api_key: None,
            system_prompt: None,
            timeout_secs: 120,
            max_retries: 4,
            initial_backoff_ms: 500,
        }
    }
}

impl HttpConfig {
    /// Fills endpoint, model and key from `LMRC_API_BASE`, `LMRC_MODEL` and
    /// `LMRC_API_KEY` when set.
    pub fn with_env(mut self) -> Self {
        if let Ok(v) = env::var(ENV_API_BASE) {
            self.api_base = v;
        }
        if let Ok(v) = env::var(ENV_MODEL) {
            self.model = v;
        }
        if self.api_key.is_none() {
            self.api_key = env::var(ENV_API_KEY).ok();
        }
        self
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

enum Attempt {
    Done(GenerationResult),
    Retry(String),
    Fatal(String),
}

fn is_context_overflow(body: &str) -> bool {
    let b = body.to_ascii_lowercase();
    b.contains("context_length") || b.contains("context length") || b.contains("maximum context")
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self> {
        let client = Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpBackend { config, client })
    }

    fn url(&self) -> String {
        format!("{}/chat/completions", self.config.api_base.trim_end_matches('/'))
    }

    fn body(&self, req: &GenerationRequest) -> serde_json::Value {
        let mut messages = Vec::new();
        if let Some(s) = &self.config.system_prompt {
            messages.push(json!({"role": "system", "content": s}));
        }
        messages.push(json!({"role": "user", "content": req.prompt}));
        json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "stop": req.stop,
        })
    }

    fn attempt(&self, req: &GenerationRequest, started: Instant) -> Attempt {
        let mut builder = self.client.post(self.url()).json(&self.body(req));
        if let Some(k) = &self.config.api_key {
            builder = builder.bearer_auth(k);
        }
        let resp = match builder.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("transport: {e}")),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading body: {e}")),
        };
        let latency_ms = started.elapsed().as_millis() as u64;
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Attempt::Retry(format!("status {status}"));
        }
        if status == StatusCode::BAD_REQUEST && is_context_overflow(&text) {
            return Attempt::Done(GenerationResult {
                text: String::new(),
                finish_reason: FinishReason::Length,
                latency_ms,
                usage: None,
            });
        }
        if !status.is_success() {
            return Attempt::Fatal(format!("status {status}: {}", text.chars().take(200).collect::<String>()));
        }
        let parsed: ChatResponse = match serde_json::from_str(&text) {
            Ok(p) => p,
            Err(e) => return Attempt::Fatal(format!("malformed response: {e}")),
        };
        let Some(choice) = parsed.choices.into_iter().next() else {
            return Attempt::Fatal("response has no choices".into());
        };
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("stop") | None => FinishReason::Stop,
            Some(_) => FinishReason::Error,
        };
        Attempt::Done(GenerationResult {
            text: choice.message.content.unwrap_or_default(),
            finish_reason,
            latency_ms,
            usage: parsed.usage,
        })
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> String {
        format!("http:{}", self.config.model)
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult> {
        req.validate()?;
        let started = Instant::now();
        let mut backoff = Duration::from_millis(self.config.initial_backoff_ms);
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                thread::sleep(backoff);
                backoff *= 2;
            }
            match self.attempt(req, started) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Retry(m) => last = m,
                Attempt::Fatal(m) => {
                    return Err(Error::Backend {
                        tag: req.tag.to_string(),
                        message: m,
                    })
                }
            }
        }
        Err(Error::Backend {
            tag: req.tag.to_string(),
            message: format!("giving up after {} attempts: {last}", self.config.max_retries + 1),
        })
    }
}
