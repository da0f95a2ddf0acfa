use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{sha256_hex, Backend, BackendError, CompletionRequest, FixtureRecord, ScriptTable};

/// One logged call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub prompt_hash: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop: Vec<String>,
    pub n: u32,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub responses: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Wraps a backend and records every call. [`RecordingBackend::to_table`]
/// turns the log into an exact-key replay fixture.
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<Vec<CallRecord>>,
}

impl<B: Backend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn log(&self) -> Vec<CallRecord> {
        self.log.lock().expect("log lock poisoned").clone()
    }

    pub fn into_inner(self) -> B {
        self.inner
    }

    /// Exact-key table reproducing every successful call in order. Greedy
    /// calls contribute one response, sampled calls all `n`.
    pub fn to_table(&self) -> ScriptTable {
        let mut table = ScriptTable::new();
        for rec in self.log.lock().expect("log lock poisoned").iter() {
            let Some(responses) = &rec.responses else {
                continue;
            };
            let kept = if rec.temperature == 0.0 {
                responses.iter().take(1).cloned().collect()
            } else {
                responses.clone()
            };
            table.insert(FixtureRecord {
                key: rec.prompt_hash.clone(),
                window: None,
                responses: kept,
            });
        }
        table
    }
}

impl<B: Backend> Backend for RecordingBackend<B> {
    fn complete(&self, req: &CompletionRequest) -> Result<Vec<String>, BackendError> {
        let start = Instant::now();
        let result = self.inner.complete(req);
        let rec = CallRecord {
            prompt_hash: sha256_hex(&req.prompt),
            temperature: req.temperature,
            max_tokens: req.max_tokens,
            stop: req.stop.clone(),
            n: req.n,
            latency_ms: start.elapsed().as_millis() as u64,
            responses: result.as_ref().ok().cloned(),
            error: result.as_ref().err().map(|e| e.to_string()),
        };
        self.log.lock().expect("log lock poisoned").push(rec);
        result
    }

    fn calls(&self) -> usize {
        self.inner.calls()
    }
}
