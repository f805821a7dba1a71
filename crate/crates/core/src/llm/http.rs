use std::fmt;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{CompletionProvider, CompletionRequest, LlmError};

const BODY_EXCERPT: usize = 512;

/// At most `requests` calls per `per` window, enforced as an even spacing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RateLimit {
    pub requests: u32,
    pub per: Duration,
}

impl RateLimit {
    fn spacing(&self) -> Duration {
        self.per / self.requests.max(1)
    }
}

#[derive(Clone)]
pub struct ProviderConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub api_key: Option<String>,
    pub retry_limit: u32,
    pub request_timeout: Duration,
    pub rate_limit: Option<RateLimit>,
    /// First backoff delay; doubles after each failed attempt.
    pub backoff_base: Duration,
}

impl fmt::Debug for ProviderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProviderConfig")
            .field("endpoint", &self.endpoint)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .field("retry_limit", &self.retry_limit)
            .field("request_timeout", &self.request_timeout)
            .field("rate_limit", &self.rate_limit)
            .finish()
    }
}

impl ProviderConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            retry_limit: 3,
            request_timeout: Duration::from_secs(120),
            rate_limit: None,
            backoff_base: Duration::from_millis(500),
        }
    }
}

/// Chat-completions client over blocking HTTP.
pub struct HttpProvider {
    config: ProviderConfig,
    client: reqwest::blocking::Client,
    next_slot: Mutex<Instant>,
}

enum Failure {
    Transient(LlmError),
    Fatal(LlmError),
}

impl HttpProvider {
    pub fn new(config: ProviderConfig) -> Result<Self, LlmError> {
        if config.request_timeout.is_zero() {
            return Err(LlmError::InvalidRequest("request timeout must be positive".into()));
        }
        reqwest::Url::parse(&config.endpoint)
            .map_err(|e| LlmError::InvalidRequest(format!("bad endpoint `{}`: {e}", config.endpoint)))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| LlmError::Provider(e.to_string()))?;
        Ok(Self {
            config,
            client,
            next_slot: Mutex::new(Instant::now()),
        })
    }

    fn wait_for_slot(&self) {
        let Some(limit) = self.config.rate_limit else {
            return;
        };
        let wait = {
            let mut slot = self.next_slot.lock().unwrap();
            let now = Instant::now();
            let start = (*slot).max(now);
            *slot = start + limit.spacing();
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }

    fn attempt(&self, body: &Value) -> Result<String, Failure> {
        self.wait_for_slot();
        let mut req = self.client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                Failure::Transient(LlmError::Timeout(self.config.request_timeout))
            } else {
                Failure::Transient(LlmError::Provider(e.to_string()))
            }
        })?;
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| Failure::Transient(LlmError::Provider(e.to_string())))?;
        if !status.is_success() {
            let err = LlmError::Api {
                status: status.as_u16(),
                body: text.chars().take(BODY_EXCERPT).collect(),
            };
            return Err(if status.as_u16() == 429 || status.is_server_error() {
                Failure::Transient(err)
            } else {
                Failure::Fatal(err)
            });
        }
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Fatal(LlmError::Provider(format!("response is not JSON: {e}"))))?;
        parsed
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| Failure::Fatal(LlmError::Provider("response lacks choices[0].message.content".into())))
    }
}

pub(crate) fn request_body(request: &CompletionRequest) -> Value {
    json!({
        "model": request.model_name,
        "messages": [
            {"role": "system", "content": request.system_prompt},
            {"role": "user", "content": request.user_prompt},
        ],
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
        "stream": false,
    })
}

impl CompletionProvider for HttpProvider {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        request.validate()?;
        let body = request_body(request);
        let attempts = self.config.retry_limit + 1;
        let mut delay = self.config.backoff_base;
        let mut last = None;
        for attempt in 1..=attempts {
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(e)) => {
                    tracing::warn!(attempt, error = %e, "transient completion failure");
                    last = Some(e);
                    if attempt < attempts {
                        std::thread::sleep(delay);
                        delay *= 2;
                    }
                }
            }
        }
        match last {
            Some(LlmError::Timeout(d)) => Err(LlmError::Timeout(d)),
            Some(e) => Err(LlmError::RetriesExhausted {
                attempts,
                last: e.to_string(),
            }),
            None => unreachable!("at least one attempt is made"),
        }
    }
}
