use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatRequest, ChatResponse, VlmError, VlmProvider};

fn put_len_prefixed(h: &mut Sha256, bytes: &[u8]) {
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
}

/// SHA-256 over model id, prompt, per-image SHA-256, temperature bits and
/// call ordinal, each field length-prefixed. Lowercase hex.
pub fn request_digest(req: &ChatRequest) -> String {
    let mut h = Sha256::new();
    put_len_prefixed(&mut h, req.model_id.as_bytes());
    put_len_prefixed(&mut h, req.prompt_text.as_bytes());
    h.update((req.images.len() as u64).to_le_bytes());
    for img in &req.images {
        h.update(Sha256::digest(img));
    }
    h.update(req.temperature.to_bits().to_le_bytes());
    h.update(u64::from(req.call_ordinal).to_le_bytes());
    hex::encode(h.finalize())
}

/// One JSON line of a cassette file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub digest: String,
    pub model_id: String,
    pub raw_text: String,
    pub recorded_at: String,
}

/// Append-only digest -> response store backed by a JSON-lines file.
/// The first entry recorded for a digest wins.
#[derive(Debug)]
pub struct Cassette {
    path: PathBuf,
    entries: RwLock<HashMap<String, String>>,
    writer: Mutex<Option<File>>,
}

impl Cassette {
    /// Opens an existing cassette read-only.
    pub fn open(path: &Path) -> Result<Self, VlmError> {
        let entries = Self::read_entries(path)?;
        Ok(Self { path: path.to_path_buf(), entries: RwLock::new(entries), writer: Mutex::new(None) })
    }

    /// Opens or creates a cassette for appending.
    pub fn open_writable(path: &Path) -> Result<Self, VlmError> {
        let entries = if path.exists() { Self::read_entries(path)? } else { HashMap::new() };
        let file =
            OpenOptions::new().create(true).append(true).open(path).map_err(|e| Self::err(path, e.to_string()))?;
        Ok(Self { path: path.to_path_buf(), entries: RwLock::new(entries), writer: Mutex::new(Some(file)) })
    }

    fn err(path: &Path, reason: String) -> VlmError {
        VlmError::Cassette { path: path.display().to_string(), reason }
    }

    fn read_entries(path: &Path) -> Result<HashMap<String, String>, VlmError> {
        let file = File::open(path).map_err(|e| Self::err(path, e.to_string()))?;
        let mut out = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Self::err(path, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry =
                serde_json::from_str(&line).map_err(|e| Self::err(path, format!("line {}: {e}", i + 1)))?;
            out.entry(entry.digest).or_insert(entry.raw_text);
        }
        Ok(out)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cassette lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, digest: &str) -> Option<String> {
        self.entries.read().expect("cassette lock").get(digest).cloned()
    }

    /// Records a response unless the digest is already present.
    pub fn append(&self, req: &ChatRequest, raw_text: &str) -> Result<(), VlmError> {
        let digest = request_digest(req);
        let mut writer = self.writer.lock().expect("cassette writer lock");
        let file = writer.as_mut().ok_or_else(|| Self::err(&self.path, "cassette opened read-only".into()))?;
        let mut entries = self.entries.write().expect("cassette lock");
        if entries.contains_key(&digest) {
            return Ok(());
        }
        let entry = CassetteEntry {
            digest: digest.clone(),
            model_id: req.model_id.clone(),
            raw_text: raw_text.to_string(),
            recorded_at: chrono::Utc::now().to_rfc3339(),
        };
        let mut line = serde_json::to_string(&entry).map_err(|e| Self::err(&self.path, e.to_string()))?;
        line.push('\n');
        file.write_all(line.as_bytes()).and_then(|_| file.flush()).map_err(|e| Self::err(&self.path, e.to_string()))?;
        entries.insert(digest, raw_text.to_string());
        Ok(())
    }
}

/// Serves responses from a cassette only; a miss is an error.
pub struct ReplayProvider {
    cassette: Cassette,
}

impl ReplayProvider {
    pub fn new(cassette: Cassette) -> Self {
        Self { cassette }
    }

    pub fn open(path: &Path) -> Result<Self, VlmError> {
        Ok(Self::new(Cassette::open(path)?))
    }
}

impl VlmProvider for ReplayProvider {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, VlmError> {
        let digest = request_digest(request);
        self.cassette.get(&digest).map(ChatResponse::text).ok_or(VlmError::CassetteMiss { digest })
    }
}

/// Forwards misses to `inner` and appends the answers; hits are served from
/// the cassette without touching `inner`.
pub struct RecordingProvider<P> {
    inner: P,
    cassette: Cassette,
}

impl<P: VlmProvider> RecordingProvider<P> {
    pub fn new(inner: P, cassette: Cassette) -> Self {
        Self { inner, cassette }
    }

    pub fn cassette(&self) -> &Cassette {
        &self.cassette
    }
}

impl<P: VlmProvider> VlmProvider for RecordingProvider<P> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, VlmError> {
        if let Some(text) = self.cassette.get(&request_digest(request)) {
            return Ok(ChatResponse::text(text));
        }
        let resp = self.inner.complete(request)?;
        self.cassette.append(request, &resp.raw_text)?;
        Ok(resp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlm::ScriptedProvider;

    fn req(ordinal: u32) -> ChatRequest {
        ChatRequest { call_ordinal: ordinal, ..ChatRequest::new("m", "read the plate", vec![vec![1, 2, 3]]) }
    }

    #[test]
    fn digest_covers_every_field() {
        let base = req(0);
        let d = request_digest(&base);
        assert_eq!(d.len(), 64);
        assert_eq!(d, request_digest(&base.clone()));
        let variants = [
            ChatRequest { model_id: "n".into(), ..base.clone() },
            ChatRequest { prompt_text: "read the plate!".into(), ..base.clone() },
            ChatRequest { images: vec![vec![1, 2, 4]], ..base.clone() },
            ChatRequest { images: vec![vec![1, 2, 3], vec![1, 2, 3]], ..base.clone() },
            ChatRequest { temperature: 0.7, ..base.clone() },
            ChatRequest { call_ordinal: 1, ..base.clone() },
        ];
        for v in variants {
            assert_ne!(request_digest(&v), d);
        }
        // max_tokens is not part of the identity.
        assert_eq!(request_digest(&ChatRequest { max_tokens: 9, ..base }), d);
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let stub = ScriptedProvider::from_pairs([("read the plate", "{\"license_plate\":\"ABC1234\"}")]);
        let rec = RecordingProvider::new(&stub, Cassette::open_writable(&path).unwrap());
        let first = rec.complete(&req(0)).unwrap();
        rec.complete(&req(0)).unwrap();
        assert_eq!(stub.calls(), 1);
        assert_eq!(rec.cassette().len(), 1);
        drop(rec);

        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1);
        let entry: CassetteEntry = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(entry.model_id, "m");

        let replay = ReplayProvider::open(&path).unwrap();
        assert_eq!(replay.complete(&req(0)).unwrap().raw_text, first.raw_text);
        assert!(matches!(replay.complete(&req(1)), Err(VlmError::CassetteMiss { .. })));
    }

    #[test]
    fn read_only_cassette_refuses_appends() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "").unwrap();
        let c = Cassette::open(&path).unwrap();
        assert!(c.append(&req(0), "x").is_err());
    }

    #[test]
    fn corrupt_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        std::fs::write(&path, "{not json}\n").unwrap();
        assert!(matches!(Cassette::open(&path), Err(VlmError::Cassette { .. })));
    }
}
