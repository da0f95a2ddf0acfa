use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, CompletionRequest};

pub const ENV_LM_URL: &str = "INTERLEAVE_LM_URL";
pub const ENV_LM_TOKEN: &str = "INTERLEAVE_LM_TOKEN";

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub url: String,
    pub token: Option<String>,
    pub timeout: Duration,
    /// Retries after a rate-limited response.
    pub max_retries: u32,
    /// First backoff delay; doubles per retry unless the server sends
    /// `Retry-After`.
    pub backoff: Duration,
}

impl HttpConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            token: None,
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff: Duration::from_millis(500),
        }
    }

    /// Reads the endpoint and optional bearer token from the environment.
    pub fn from_env() -> Result<Self, BackendError> {
        let url = std::env::var(ENV_LM_URL)
            .map_err(|_| BackendError::Unavailable(format!("{ENV_LM_URL} is not set")))?;
        let mut cfg = Self::new(url);
        cfg.token = std::env::var(ENV_LM_TOKEN).ok().filter(|t| !t.is_empty());
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    prompt: &'a str,
    temperature: f64,
    max_tokens: u32,
    stop: &'a [String],
    n: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
}

/// Client for the completions contract: `POST {url}` with
/// `{prompt, temperature, max_tokens, stop, n}`, answered by
/// `{"choices": [{"text": ...}, ...]}`.
pub struct HttpBackend {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
    calls: AtomicUsize,
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        Ok(Self {
            cfg,
            client,
            calls: AtomicUsize::new(0),
        })
    }

    fn attempt(&self, req: &CompletionRequest) -> Result<Vec<String>, BackendError> {
        let body = WireRequest {
            prompt: &req.prompt,
            temperature: req.temperature,
            max_tokens: req.max_tokens,
            stop: &req.stop,
            n: req.n,
        };
        let mut builder = self.client.post(&self.cfg.url).json(&body);
        if let Some(token) = &self.cfg.token {
            builder = builder.bearer_auth(token);
        }
        let resp = builder
            .send()
            .map_err(|e| BackendError::Unavailable(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 {
            let after = resp
                .headers()
                .get(reqwest::header::RETRY_AFTER)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<u64>().ok())
                .map(Duration::from_secs);
            return Err(BackendError::RateLimited { after });
        }
        if status.is_server_error() {
            return Err(BackendError::Unavailable(format!("server returned {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::Protocol(format!("server returned {status}")));
        }
        let parsed: WireResponse = resp
            .json()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        if parsed.choices.len() != req.n as usize {
            return Err(BackendError::Protocol(format!(
                "expected {} choices, got {}",
                req.n,
                parsed.choices.len()
            )));
        }
        Ok(parsed.choices.into_iter().map(|c| c.text).collect())
    }
}

impl Backend for HttpBackend {
    fn complete(&self, req: &CompletionRequest) -> Result<Vec<String>, BackendError> {
        req.validate()?;
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut delay = self.cfg.backoff;
        let mut retries = 0;
        loop {
            match self.attempt(req) {
                Err(BackendError::RateLimited { after }) if retries < self.cfg.max_retries => {
                    retries += 1;
                    let wait = after.unwrap_or(delay);
                    tracing::warn!(retries, ?wait, "rate limited, backing off");
                    std::thread::sleep(wait);
                    delay *= 2;
                }
                other => return other,
            }
        }
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Serves the given raw responses, one per connection, and captures the
    /// request bodies.
    fn serve(responses: Vec<String>) -> (String, Arc<Mutex<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let seen = bodies.clone();
        std::thread::spawn(move || {
            for raw in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut body = vec![0u8; len];
                reader.read_exact(&mut body).unwrap();
                seen.lock().unwrap().push(String::from_utf8(body).unwrap());
                let mut stream = reader.into_inner();
                stream.write_all(raw.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}/v1/complete"), bodies)
    }

    fn ok(body: &str) -> String {
        format!(
            "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
            body.len(),
            body
        )
    }

    fn config(url: String) -> HttpConfig {
        HttpConfig {
            backoff: Duration::from_millis(1),
            ..HttpConfig::new(url)
        }
    }

    #[test]
    fn round_trip_fields() {
        let (url, bodies) = serve(vec![ok(r#"{"choices":[{"text":" Search[Milhouse]"}]}"#)]);
        let b = HttpBackend::new(config(url)).unwrap();
        let got = b.complete(&CompletionRequest::greedy("P", &["\n"])).unwrap();
        assert_eq!(got, vec![" Search[Milhouse]"]);
        let sent: serde_json::Value = serde_json::from_str(&bodies.lock().unwrap()[0]).unwrap();
        assert_eq!(sent["prompt"], "P");
        assert_eq!(sent["stop"][0], "\n");
        assert_eq!(sent["n"], 1);
        assert_eq!(sent["temperature"], 0.0);
    }

    #[test]
    fn rate_limit_then_success() {
        let limited = "HTTP/1.1 429 Too Many Requests\r\nretry-after: 0\r\ncontent-length: 0\r\nconnection: close\r\n\r\n".to_string();
        let (url, _) = serve(vec![limited, ok(r#"{"choices":[{"text":"x"}]}"#)]);
        let b = HttpBackend::new(config(url)).unwrap();
        assert_eq!(b.complete(&CompletionRequest::greedy("P", &[])).unwrap(), vec!["x"]);
    }

    #[test]
    fn rate_limit_exhausts_retries() {
        let limited = "HTTP/1.1 429 Too Many Requests\r\nretry-after: 0\r\ncontent-length: 0\r\nconnection: close\r\n\r\n".to_string();
        let (url, _) = serve(vec![limited; 4]);
        let b = HttpBackend::new(config(url)).unwrap();
        let err = b.complete(&CompletionRequest::greedy("P", &[])).unwrap_err();
        assert_eq!(
            err,
            BackendError::RateLimited {
                after: Some(Duration::from_secs(0))
            }
        );
    }

    #[test]
    fn unreachable_host_is_unavailable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let b = HttpBackend::new(config(format!("http://{addr}/"))).unwrap();
        let err = b.complete(&CompletionRequest::greedy("P", &[])).unwrap_err();
        assert!(matches!(err, BackendError::Unavailable(_)), "{err:?}");
    }

    #[test]
    fn wrong_choice_count_is_protocol_error() {
        let (url, _) = serve(vec![ok(r#"{"choices":[]}"#)]);
        let b = HttpBackend::new(config(url)).unwrap();
        let err = b.complete(&CompletionRequest::greedy("P", &[])).unwrap_err();
        assert!(matches!(err, BackendError::Protocol(_)));
    }
}
