//! Completion providers and helpers for turning model output into data.

mod http;
mod json;
mod scripted;

use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use http::{HttpProvider, ProviderConfig, RateLimit};
pub use json::{extract_json, JsonExtractError};
pub use scripted::ScriptedProvider;

pub const DEFAULT_TEMPERATURE: f64 = 0.8;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub model_name: String,
}

/// Model parameters shared by every request a pipeline stage issues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSettings {
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for RequestSettings {
    fn default() -> Self {
        Self {
            model_name: "llama3:70b-instruct-q8_0".into(),
            temperature: DEFAULT_TEMPERATURE,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }
}

impl RequestSettings {
    pub fn request(&self, system_prompt: String, user_prompt: String) -> CompletionRequest {
        CompletionRequest {
            system_prompt,
            user_prompt,
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            model_name: self.model_name.clone(),
        }
    }
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_output_tokens < 1 {
            return Err(LlmError::InvalidRequest("max_output_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("provider error: {0}")]
    Provider(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("API returned status {status}: {body}")]
    Api { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
}

/// Text-in, text-out completion backend. Handles are shared across threads.
pub trait CompletionProvider: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError>;
}

impl<P: CompletionProvider + ?Sized> CompletionProvider for &P {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

impl<P: CompletionProvider + ?Sized> CompletionProvider for Box<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

impl<P: CompletionProvider + ?Sized> CompletionProvider for std::sync::Arc<P> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }
}

pub fn complete(request: &CompletionRequest, provider: &dyn CompletionProvider) -> Result<String, LlmError> {
    request.validate()?;
    provider.complete(request)
}
