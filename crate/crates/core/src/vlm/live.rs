use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde_json::{json, Value};

use super::{ChatRequest, ChatResponse, VlmError, VlmProvider};

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore") += 1;
        self.0.freed.notify_one();
    }
}

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self { permits: Mutex::new(permits.max(1)), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().expect("semaphore");
        while *n == 0 {
            n = self.freed.wait(n).expect("semaphore");
        }
        *n -= 1;
        Permit(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    /// Three retries after 0.5 s, 1 s and 2 s.
    fn default() -> Self {
        Self { max_retries: 3, base_delay: Duration::from_millis(500) }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(retry)
    }
}

#[derive(Debug, Clone)]
pub struct HttpProviderConfig {
    /// OpenAI-compatible API root; requests go to `<base_url>/chat/completions`.
    pub base_url: String,
    /// Name of the environment variable carrying the bearer token, if any.
    pub api_key_env: Option<String>,
    pub max_concurrency: usize,
    pub retry: RetryPolicy,
    pub timeout: Duration,
}

impl Default for HttpProviderConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            max_concurrency: 4,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
        }
    }
}

/// Chat-completion client over HTTP with retries and a concurrency cap.
pub struct HttpProvider {
    endpoint: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    agent: ureq::Agent,
    in_flight: Semaphore,
}

enum Attempt {
    Done(ChatResponse),
    Transient(String),
    Fatal(VlmError),
}

impl HttpProvider {
    pub fn new(config: HttpProviderConfig) -> Result<Self, VlmError> {
        let api_key = match &config.api_key_env {
            Some(var) => Some(
                std::env::var(var).map_err(|_| VlmError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .new_agent();
        Ok(Self {
            endpoint: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            api_key,
            retry: config.retry,
            agent,
            in_flight: Semaphore::new(config.max_concurrency),
        })
    }

    /// Request body: one user message holding the text part followed by one
    /// `image_url` part per image as a base64 PNG data URL.
    pub fn request_body(req: &ChatRequest) -> Value {
        let mut content = vec![json!({"type": "text", "text": req.prompt_text})];
        content.extend(req.images.iter().map(|png| {
            json!({
                "type": "image_url",
                "image_url": {"url": format!("data:image/png;base64,{}", BASE64.encode(png))}
            })
        }));
        json!({
            "model": req.model_id,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
            "messages": [{"role": "user", "content": content}],
        })
    }

    /// Text of `choices[0].message.content`, which may be a string or a list
    /// of text parts.
    pub fn parse_body(body: &Value) -> Result<(String, Option<u64>, Option<u64>), VlmError> {
        let content = &body["choices"][0]["message"]["content"];
        let text = match content {
            Value::String(s) => s.clone(),
            Value::Array(parts) => parts.iter().filter_map(|p| p["text"].as_str()).collect::<Vec<_>>().join(""),
            _ => return Err(VlmError::Provider("response has no choices[0].message.content".into())),
        };
        if text.is_empty() {
            return Err(VlmError::Provider("provider returned empty content".into()));
        }
        let usage = &body["usage"];
        Ok((text, usage["prompt_tokens"].as_u64(), usage["completion_tokens"].as_u64()))
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let _permit = self.in_flight.acquire();
        let started = Instant::now();
        let mut call = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match call.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Transient(e.to_string()),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Transient(format!("reading body: {e}")),
        };
        if status == 429 || status >= 500 {
            return Attempt::Transient(format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()));
        }
        if status >= 400 {
            return Attempt::Fatal(VlmError::Provider(format!(
                "HTTP {status}: {}",
                text.chars().take(200).collect::<String>()
            )));
        }
        let parsed = serde_json::from_str::<Value>(&text)
            .map_err(|e| VlmError::Provider(format!("response is not JSON: {e}")))
            .and_then(|v| Self::parse_body(&v));
        match parsed {
            Ok((raw_text, prompt_tokens, completion_tokens)) => Attempt::Done(ChatResponse {
                raw_text,
                prompt_tokens,
                completion_tokens,
                latency_ms: started.elapsed().as_millis() as u64,
            }),
            Err(e) => Attempt::Fatal(e),
        }
    }
}

impl VlmProvider for HttpProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, VlmError> {
        let body = Self::request_body(request);
        let mut last = String::new();
        for attempt in 0..=self.retry.max_retries {
            if attempt > 0 {
                // The permit is released while sleeping.
                thread::sleep(self.retry.delay(attempt - 1));
            }
            match self.attempt(&body) {
                Attempt::Done(r) => return Ok(r),
                Attempt::Fatal(e) => return Err(e),
                Attempt::Transient(msg) => {
                    log::warn!("transient provider failure (attempt {}): {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(VlmError::RetriesExhausted { attempts: self.retry.max_retries + 1, last })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn backoff_schedule() {
        let p = RetryPolicy::default();
        let d: Vec<_> = (0..3).map(|i| p.delay(i).as_millis()).collect();
        assert_eq!(d, [500, 1000, 2000]);
    }

    #[test]
    fn body_shape() {
        let req = ChatRequest::new("gpt-4o", "hello", vec![vec![137, 80], vec![1]]);
        let b = HttpProvider::request_body(&req);
        assert_eq!(b["model"], "gpt-4o");
        assert_eq!(b["max_tokens"], 200);
        let content = b["messages"][0]["content"].as_array().unwrap();
        assert_eq!(content.len(), 3);
        assert_eq!(content[0]["text"], "hello");
        assert!(content[1]["image_url"]["url"].as_str().unwrap().starts_with("data:image/png;base64,"));
    }

    #[test]
    fn parses_string_and_part_contents() {
        let v =
            json!({"choices": [{"message": {"content": "hi"}}], "usage": {"prompt_tokens": 5, "completion_tokens": 2}});
        assert_eq!(HttpProvider::parse_body(&v).unwrap(), ("hi".into(), Some(5), Some(2)));
        let v = json!({"choices": [{"message": {"content": [{"type": "text", "text": "a"}, {"text": "b"}]}}]});
        assert_eq!(HttpProvider::parse_body(&v).unwrap().0, "ab");
        assert!(HttpProvider::parse_body(&json!({"choices": []})).is_err());
    }

    #[test]
    fn missing_key_env_is_config_error() {
        let cfg = HttpProviderConfig {
            api_key_env: Some("PLATELENS_SURELY_UNSET_VAR".into()),
            ..HttpProviderConfig::default()
        };
        assert!(matches!(HttpProvider::new(cfg), Err(VlmError::Config(_))));
    }

    #[test]
    fn semaphore_bounds_concurrency() {
        let sem = Arc::new(Semaphore::new(2));
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        thread::scope(|s| {
            for _ in 0..8 {
                let (sem, live, peak) = (sem.clone(), live.clone(), peak.clone());
                s.spawn(move || {
                    let _p = sem.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(Duration::from_millis(10));
                    live.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
