use std::thread;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::json::{extract_json_object, lookup};
use super::{normalize_plate, ChatRequest, ChatResponse, Strategy, VlmError, VlmProvider};
use crate::prompts::{CarOption, CarOptions};

pub const MAX_CANDIDATES: usize = 3;
pub const PLATE_KEY: &str = "license_plate";
pub const PLATE_OPTIONS_KEY: &str = "license_plate_options";
pub const MMR_OPTIONS_KEY: &str = "make_model_options";

/// What the responses should be parsed as.
#[derive(Debug, Clone, Copy)]
pub enum TaskKind<'a> {
    Plate,
    /// `options`, when given, lets bare "Make Model" answers be recognised.
    Mmr {
        options: Option<&'a CarOptions>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Candidate {
    Plate(String),
    Vehicle(CarOption),
}

impl Candidate {
    fn identity(&self) -> (String, String) {
        match self {
            Candidate::Plate(p) => (p.clone(), String::new()),
            Candidate::Vehicle(v) => v.key(),
        }
    }

    pub fn as_plate(&self) -> Option<&str> {
        match self {
            Candidate::Plate(p) => Some(p),
            Candidate::Vehicle(_) => None,
        }
    }

    pub fn as_vehicle(&self) -> Option<&CarOption> {
        match self {
            Candidate::Vehicle(v) => Some(v),
            Candidate::Plate(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub candidates: Vec<Candidate>,
    pub raw_responses: Vec<ChatResponse>,
}

impl PredictionSet {
    pub fn calls(&self) -> usize {
        self.raw_responses.len()
    }
}

/// Bare answers without JSON are accepted only when this short.
const BARE_ANSWER_MAX: usize = 24;

fn bare_answer(raw: &str) -> Option<&str> {
    let t = raw.trim().trim_matches(|c| c == '"' || c == '`' || c == '.').trim();
    (!t.is_empty() && t.len() <= BARE_ANSWER_MAX && !t.contains(['{', '}', '\n'])).then_some(t)
}

fn plate_candidate(s: &str) -> Option<Candidate> {
    let n = normalize_plate(s);
    (!n.is_empty()).then_some(Candidate::Plate(n))
}

fn string_items(v: &Value) -> Vec<String> {
    match v {
        Value::Array(items) => items
            .iter()
            .filter_map(|i| match i {
                Value::String(s) => Some(s.clone()),
                Value::Number(n) => Some(n.to_string()),
                _ => None,
            })
            .collect(),
        Value::String(s) => vec![s.clone()],
        _ => Vec::new(),
    }
}

fn vehicle_from_object(v: &Value) -> Option<CarOption> {
    let obj = v.as_object()?;
    let make = lookup(obj, "make")?.as_str()?.trim();
    let model = lookup(obj, "model")?.as_str()?.trim();
    (!make.is_empty() && !model.is_empty()).then(|| CarOption::new(make, model))
}

fn vehicle_from_text(s: &str, options: Option<&CarOptions>) -> Option<CarOption> {
    if let Some(o) = options.and_then(|o| o.find_display(s)) {
        return Some(o.clone());
    }
    let (make, model) = s.trim().split_once(char::is_whitespace)?;
    let model = model.trim();
    (!model.is_empty()).then(|| CarOption::new(make, model))
}

/// Candidates found in one raw response, in the order given.
pub fn parse_candidates(raw: &str, strategy: Strategy, task: TaskKind<'_>) -> Vec<Candidate> {
    let object = extract_json_object(raw).ok();
    match task {
        TaskKind::Plate => {
            if let Some(obj) = &object {
                if strategy == Strategy::ThreeOptions {
                    if let Some(v) = lookup(obj, PLATE_OPTIONS_KEY) {
                        return string_items(v).iter().filter_map(|s| plate_candidate(s)).collect();
                    }
                }
                lookup(obj, PLATE_KEY)
                    .map(|v| string_items(v).iter().filter_map(|s| plate_candidate(s)).collect())
                    .unwrap_or_default()
            } else {
                bare_answer(raw).and_then(plate_candidate).into_iter().collect()
            }
        }
        TaskKind::Mmr { options } => {
            if let Some(obj) = &object {
                if strategy == Strategy::ThreeOptions {
                    if let Some(Value::Array(items)) = lookup(obj, MMR_OPTIONS_KEY) {
                        return items
                            .iter()
                            .filter_map(|i| match i {
                                Value::String(s) => vehicle_from_text(s, options),
                                other => vehicle_from_object(other),
                            })
                            .map(Candidate::Vehicle)
                            .collect();
                    }
                }
                vehicle_from_object(&Value::Object(obj.clone())).map(Candidate::Vehicle).into_iter().collect()
            } else {
                bare_answer(raw)
                    .and_then(|s| vehicle_from_text(s, options))
                    .map(Candidate::Vehicle)
                    .into_iter()
                    .collect()
            }
        }
    }
}

fn dedup(candidates: Vec<Candidate>) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = Vec::with_capacity(candidates.len());
    for c in candidates {
        if !out.iter().any(|o| o.identity() == c.identity()) {
            out.push(c);
        }
    }
    out.truncate(MAX_CANDIDATES);
    out
}

/// Issues the calls `strategy` prescribes and collects deduplicated candidates.
/// `three_calls` runs its three requests (ordinals 0, 1, 2) concurrently.
pub fn run_strategy<P: VlmProvider + ?Sized>(
    strategy: Strategy,
    base: &ChatRequest,
    provider: &P,
    task: TaskKind<'_>,
) -> Result<PredictionSet, VlmError> {
    let responses: Vec<ChatResponse> = match strategy {
        Strategy::SingleCall | Strategy::ThreeOptions => vec![provider.complete(base)?],
        Strategy::ThreeCalls => {
            let results: Vec<Result<ChatResponse, VlmError>> = thread::scope(|s| {
                let handles: Vec<_> = (0..3u32)
                    .map(|ordinal| {
                        let req = ChatRequest { call_ordinal: ordinal, ..base.clone() };
                        s.spawn(move || provider.complete(&req))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("provider call panicked")).collect()
            });
            results.into_iter().collect::<Result<_, _>>()?
        }
    };
    let parsed: Vec<Candidate> = responses
        .iter()
        .flat_map(|r| {
            let found = parse_candidates(&r.raw_text, strategy, task);
            if found.is_empty() {
                log::warn!("no candidate in response {:?}", r.raw_text.chars().take(80).collect::<String>());
            }
            found
        })
        .collect();
    let candidates = dedup(parsed);
    if candidates.is_empty() {
        return Err(VlmError::EmptyCandidates { raw_responses: responses });
    }
    Ok(PredictionSet { candidates, raw_responses: responses })
}
