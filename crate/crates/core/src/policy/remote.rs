//! Generation-only client for OpenAI-compatible chat-completions endpoints.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::{StatusCode, Url};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::PolicyError;

pub const DEFAULT_API_KEY_ENV: &str = "PRLM_API_KEY";

/// Endpoint settings. The key itself never lives here, only the name of the
/// environment variable that holds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteCfg {
    pub base_url: String,
    pub model_name: String,
    pub api_key_env: String,
    pub temperature: f64,
    pub max_tokens: usize,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub max_in_flight: usize,
    pub backoff_ms: u64,
}

impl Default for RemoteCfg {
    fn default() -> Self {
        RemoteCfg {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model_name: "default".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            temperature: 0.0,
            max_tokens: 768,
            timeout_secs: 60,
            max_retries: 3,
            max_in_flight: 4,
            backoff_ms: 250,
        }
    }
}

impl RemoteCfg {
    pub fn validate(&self) -> Result<Url, PolicyError> {
        let url = Url::parse(&self.base_url).map_err(|e| PolicyError::BadConfig(format!("base_url: {e}")))?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(PolicyError::BadConfig("base_url must be http or https".into()));
        }
        if self.max_in_flight < 1 {
            return Err(PolicyError::BadConfig("max_in_flight must be >= 1".into()));
        }
        if self.max_tokens < 1 {
            return Err(PolicyError::BadConfig("max_tokens must be >= 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(PolicyError::BadConfig("temperature must be finite and >= 0".into()));
        }
        Ok(url)
    }
}

#[derive(Debug, Clone)]
pub struct RemoteClient {
    cfg: RemoteCfg,
    endpoint: String,
    api_key: Option<String>,
    http: Client,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

enum Attempt {
    Done(String),
    Retry(PolicyError),
    Fail(PolicyError),
}

impl RemoteClient {
    /// Reads the API key from the configured environment variable, if set.
    pub fn new(cfg: RemoteCfg) -> Result<Self, PolicyError> {
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        Self::with_key(cfg, api_key)
    }

    pub fn with_key(cfg: RemoteCfg, api_key: Option<String>) -> Result<Self, PolicyError> {
        cfg.validate()?;
        let endpoint = format!("{}/chat/completions", cfg.base_url.trim_end_matches('/'));
        let http = Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs.max(1)))
            .build()
            .map_err(|e| PolicyError::Transport(e.to_string()))?;
        Ok(RemoteClient {
            cfg,
            endpoint,
            api_key,
            http,
        })
    }

    pub fn cfg(&self) -> &RemoteCfg {
        &self.cfg
    }

    fn attempt(&self, prompt: &str, max_tokens: usize) -> Attempt {
        let body = json!({
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
            "max_tokens": max_tokens,
        });
        let mut req = self.http.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) if e.is_timeout() => return Attempt::Retry(PolicyError::Timeout),
            Err(e) => return Attempt::Retry(PolicyError::Transport(e.to_string())),
        };
        let status = resp.status();
        let text = match resp.text() {
            Ok(t) => t,
            Err(e) if e.is_timeout() => return Attempt::Retry(PolicyError::Timeout),
            Err(e) => return Attempt::Retry(PolicyError::Transport(e.to_string())),
        };
        if !status.is_success() {
            let err = PolicyError::Remote { status: status.as_u16(), body: text };
            return if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
                Attempt::Retry(err)
            } else {
                Attempt::Fail(err)
            };
        }
        match serde_json::from_str::<ChatResponse>(&text) {
            Ok(r) => match r.choices.into_iter().next() {
                Some(c) => Attempt::Done(c.message.content.unwrap_or_default()),
                None => Attempt::Fail(PolicyError::Remote { status: status.as_u16(), body: text }),
            },
            Err(_) => Attempt::Fail(PolicyError::Remote { status: status.as_u16(), body: text }),
        }
    }

    /// One completion with up to `max_retries` retries on transport errors,
    /// timeouts, 429 and 5xx, doubling the backoff each time.
    pub fn complete(&self, prompt: &str, max_tokens: usize) -> Result<String, PolicyError> {
        let mut wait = Duration::from_millis(self.cfg.backoff_ms);
        let mut tries = 0;
        loop {
            match self.attempt(prompt, max_tokens) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) => {
                    if tries >= self.cfg.max_retries {
                        return Err(e);
                    }
                    tries += 1;
                    thread::sleep(wait);
                    wait = wait.saturating_mul(2);
                }
            }
        }
    }

    /// Runs all prompts with at most `max_in_flight` requests outstanding.
    /// Results come back in input order.
    pub fn complete_many(&self, prompts: &[String], max_tokens: usize) -> Vec<Result<String, PolicyError>> {
        let slots: Vec<Mutex<Option<Result<String, PolicyError>>>> = prompts.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        let workers = self.cfg.max_in_flight.min(prompts.len());
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= prompts.len() {
                        break;
                    }
                    let r = self.complete(&prompts[i], max_tokens);
                    *slots[i].lock().expect("slot lock") = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
            .collect()
    }
}
