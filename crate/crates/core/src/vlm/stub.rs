use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Deserialize;

use super::{request_digest, ChatRequest, ChatResponse, VlmError, VlmProvider};

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Script {
    One(String),
    /// Indexed by `call_ordinal`, wrapping around.
    Sequence(Vec<String>),
}

impl Script {
    fn pick(&self, ordinal: u32) -> Option<&str> {
        match self {
            Script::One(s) => Some(s),
            Script::Sequence(v) if v.is_empty() => None,
            Script::Sequence(v) => Some(&v[ordinal as usize % v.len()]),
        }
    }
}

/// Deterministic provider answering from a table keyed by request digest or
/// by a literal substring of the prompt. Digest keys win; among substring keys
/// the longest match wins, then the lexicographically smallest.
#[derive(Debug, Default)]
pub struct ScriptedProvider {
    scripts: BTreeMap<String, Script>,
    calls: AtomicUsize,
    log: Mutex<Vec<ChatRequest>>,
}

impl ScriptedProvider {
    pub fn from_pairs<K: Into<String>, V: Into<String>>(pairs: impl IntoIterator<Item = (K, V)>) -> Self {
        Self { scripts: pairs.into_iter().map(|(k, v)| (k.into(), Script::One(v.into()))).collect(), ..Self::default() }
    }

    /// Like [`from_pairs`](Self::from_pairs) with one response per call ordinal.
    pub fn from_sequences<K: Into<String>>(pairs: impl IntoIterator<Item = (K, Vec<String>)>) -> Self {
        Self { scripts: pairs.into_iter().map(|(k, v)| (k.into(), Script::Sequence(v))).collect(), ..Self::default() }
    }

    /// JSON object mapping digest-or-substring to a string or a list of strings.
    pub fn load(path: &Path) -> Result<Self, VlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VlmError::Config(format!("stub script {}: {e}", path.display())))?;
        let scripts: BTreeMap<String, Script> = serde_json::from_str(&text)
            .map_err(|e| VlmError::Config(format!("stub script {}: {e}", path.display())))?;
        Ok(Self { scripts, ..Self::default() })
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.log.lock().expect("stub log").clone()
    }

    fn lookup(&self, req: &ChatRequest) -> Option<&str> {
        if let Some(s) = self.scripts.get(&request_digest(req)) {
            return s.pick(req.call_ordinal);
        }
        self.scripts
            .iter()
            .filter(|(k, _)| !k.is_empty() && req.prompt_text.contains(k.as_str()))
            .max_by(|(a, _), (b, _)| a.len().cmp(&b.len()).then(b.cmp(a)))
            .and_then(|(_, s)| s.pick(req.call_ordinal))
    }
}

impl VlmProvider for ScriptedProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, VlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().expect("stub log").push(request.clone());
        self.lookup(request).map(ChatResponse::text).ok_or_else(|| {
            VlmError::Provider(format!(
                "stub has no response for request {} ({:?}...)",
                request_digest(request),
                request.prompt_text.chars().take(40).collect::<String>()
            ))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(prompt: &str, ordinal: u32) -> ChatRequest {
        ChatRequest { call_ordinal: ordinal, ..ChatRequest::new("m", prompt, vec![vec![0]]) }
    }

    #[test]
    fn longest_substring_wins() {
        let s = ScriptedProvider::from_pairs([("plate", "short"), ("license plate", "long")]);
        assert_eq!(s.complete(&req("read the license plate", 0)).unwrap().raw_text, "long");
        assert_eq!(s.complete(&req("a plate", 0)).unwrap().raw_text, "short");
        assert!(s.complete(&req("nothing", 0)).is_err());
        assert_eq!(s.calls(), 3);
    }

    #[test]
    fn digest_key_takes_priority() {
        let r = req("read the plate", 0);
        let s = ScriptedProvider::from_pairs([
            (request_digest(&r), "by digest".to_string()),
            ("plate".into(), "by text".into()),
        ]);
        assert_eq!(s.complete(&r).unwrap().raw_text, "by digest");
        assert_eq!(s.complete(&req("read the plate", 1)).unwrap().raw_text, "by text");
    }

    #[test]
    fn sequences_follow_ordinal() {
        let s = ScriptedProvider::from_sequences([("p", vec!["A".into(), "B".into()])]);
        let got: Vec<_> = (0..3).map(|i| s.complete(&req("p", i)).unwrap().raw_text).collect();
        assert_eq!(got, ["A", "B", "A"]);
    }

    #[test]
    fn loads_mixed_json_script() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stub.json");
        std::fs::write(&p, r#"{"plate": "x", "make": ["a", "b"]}"#).unwrap();
        let s = ScriptedProvider::load(&p).unwrap();
        assert_eq!(s.complete(&req("make", 1)).unwrap().raw_text, "b");
    }
}
