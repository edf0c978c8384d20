//! Provider-agnostic VLM querying.
//!
//! A [`VlmProvider`] turns a [`ChatRequest`] into raw text. Providers come in
//! four flavours: live HTTP ([`HttpProvider`]), a scripted stub
//! ([`ScriptedProvider`]), cassette replay ([`ReplayProvider`]) and a
//! recording wrapper ([`RecordingProvider`]). [`run_strategy`] issues the one
//! or three calls a prompting strategy needs and parses the candidates.

mod cassette;
mod json;
mod live;
mod strategy;
mod stub;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cassette::{request_digest, Cassette, CassetteEntry, RecordingProvider, ReplayProvider};
pub use json::{extract_json, extract_json_object};
pub use live::{HttpProvider, HttpProviderConfig, RetryPolicy, Semaphore};
pub use strategy::{parse_candidates, run_strategy, Candidate, PredictionSet, TaskKind};
pub use stub::ScriptedProvider;

#[derive(Debug, Error)]
pub enum VlmError {
    #[error("provider error: {0}")]
    Provider(String),
    #[error("provider gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("cassette has no recording for request {digest}")]
    CassetteMiss { digest: String },
    #[error("cassette {path}: {reason}")]
    Cassette { path: String, reason: String },
    #[error("json extraction: {0}")]
    Extraction(String),
    #[error("no candidate could be parsed from {} response(s)", raw_responses.len())]
    EmptyCandidates { raw_responses: Vec<ChatResponse> },
    #[error("provider config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    SingleCall,
    ThreeOptions,
    ThreeCalls,
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Strategy::SingleCall => "Single Call",
            Strategy::ThreeOptions => "Three Options",
            Strategy::ThreeCalls => "Three Calls",
        }
    }

    pub fn calls(self) -> u32 {
        match self {
            Strategy::ThreeCalls => 3,
            Strategy::SingleCall | Strategy::ThreeOptions => 1,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', ' '], "_").as_str() {
            "single_call" | "single" => Ok(Strategy::SingleCall),
            "three_options" => Ok(Strategy::ThreeOptions),
            "three_calls" => Ok(Strategy::ThreeCalls),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model_id: String,
    pub prompt_text: String,
    /// PNG-encoded images in message order.
    pub images: Vec<Vec<u8>>,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Distinguishes repeated identical calls.
    pub call_ordinal: u32,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, prompt_text: impl Into<String>, images: Vec<Vec<u8>>) -> Self {
        Self {
            model_id: model_id.into(),
            prompt_text: prompt_text.into(),
            images,
            temperature: 0.2,
            max_tokens: 200,
            call_ordinal: 0,
        }
    }

    pub fn digest(&self) -> String {
        request_digest(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub raw_text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
    pub latency_ms: u64,
}

impl ChatResponse {
    pub fn text(raw_text: impl Into<String>) -> Self {
        Self { raw_text: raw_text.into(), prompt_tokens: None, completion_tokens: None, latency_ms: 0 }
    }
}

pub trait VlmProvider: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, VlmError>;
}

impl<P: VlmProvider + ?Sized> VlmProvider for &P {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, VlmError> {
        (**self).complete(request)
    }
}

impl<P: VlmProvider + ?Sized> VlmProvider for Box<P> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, VlmError> {
        (**self).complete(request)
    }
}

impl<P: VlmProvider + ?Sized> VlmProvider for std::sync::Arc<P> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, VlmError> {
        (**self).complete(request)
    }
}

/// Uppercases and keeps ASCII letters and digits only.
pub fn normalize_plate(s: &str) -> String {
    s.to_lowercase().chars().filter(char::is_ascii_alphanumeric).map(|c| c.to_ascii_uppercase()).collect()
}
