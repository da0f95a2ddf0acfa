//! Text-completion backends.
//!
//! [`Backend`] is the one interface the agent loop and the combinators talk
//! to. Implementations: [`ScriptedBackend`] (replay from a fixture table),
//! [`HttpBackend`] (minimal completions-style JSON API), and
//! [`RecordingBackend`] (wraps another backend and logs every call so a live
//! run can be turned into a fixture).

mod http;
mod record;
mod scripted;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use http::{HttpBackend, HttpConfig, ENV_LM_TOKEN, ENV_LM_URL};
pub use record::{CallRecord, RecordingBackend};
pub use scripted::{FixtureRecord, KeyMode, ScriptedBackend, ScriptTable, DEFAULT_WINDOW};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop: Vec<String>,
    pub n: u32,
}

impl CompletionRequest {
    /// Greedy single-sample request.
    pub fn greedy(prompt: impl Into<String>, stop: &[&str]) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: 0.0,
            max_tokens: 256,
            stop: stop.iter().map(|s| s.to_string()).collect(),
            n: 1,
        }
    }

    pub fn sampled(prompt: impl Into<String>, stop: &[&str], temperature: f64, n: u32) -> Self {
        Self {
            temperature,
            n,
            ..Self::greedy(prompt, stop)
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::BadRequest("temperature must be >= 0".into()));
        }
        if self.n == 0 || self.max_tokens == 0 {
            return Err(BackendError::BadRequest("n and max_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("rate limited (retry after {after:?})")]
    RateLimited { after: Option<Duration> },
    #[error("no scripted response for prompt key {0}")]
    ScriptMiss(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

pub trait Backend: Send + Sync {
    /// Returns exactly `req.n` completion texts.
    fn complete(&self, req: &CompletionRequest) -> Result<Vec<String>, BackendError>;

    /// Number of `complete` calls served so far.
    fn calls(&self) -> usize;
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<Vec<String>, BackendError> {
        (**self).complete(req)
    }

    fn calls(&self) -> usize {
        (**self).calls()
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<Vec<String>, BackendError> {
        (**self).complete(req)
    }

    fn calls(&self) -> usize {
        (**self).calls()
    }
}

/// Lowercase hex sha256 of `text`.
pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Key for the last `window` characters of `prompt`.
pub fn suffix_key(prompt: &str, window: usize) -> String {
    let count = prompt.chars().count();
    let skip = count.saturating_sub(window);
    let start = prompt.char_indices().nth(skip).map_or(prompt.len(), |(i, _)| i);
    sha256_hex(&prompt[start..])
}
