//! Image/text embedding backends: a deterministic hash stub and an HTTP
//! client for the encoder sidecar.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Tolerance on the L2 norm of every embedding.
pub const UNIT_TOLERANCE: f64 = 1e-3;

pub const DEFAULT_STUB_DIM: usize = 512;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding contract: {0}")]
    Contract(String),
    #[error("embedding backend: {0}")]
    Backend(String),
    #[error("embedding model mismatch: expected {expected}, backend reports {actual}")]
    ModelMismatch { expected: String, actual: String },
}

/// An L2-unit vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Embedding(Vec<f32>);

impl TryFrom<Vec<f32>> for Embedding {
    type Error = EmbeddingError;

    fn try_from(v: Vec<f32>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<Embedding> for Vec<f32> {
    fn from(e: Embedding) -> Self {
        e.0
    }
}

fn l2(v: &[f32]) -> f64 {
    v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt()
}

impl Embedding {
    /// Accepts a vector whose norm is already 1 within [`UNIT_TOLERANCE`].
    pub fn new(v: Vec<f32>) -> Result<Self, EmbeddingError> {
        if v.is_empty() {
            return Err(EmbeddingError::Contract("empty embedding".into()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EmbeddingError::Contract("non-finite embedding component".into()));
        }
        let n = l2(&v);
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(EmbeddingError::Contract(format!("embedding norm {n:.6} is not 1")));
        }
        Ok(Self(v))
    }

    pub fn normalized(v: Vec<f32>) -> Result<Self, EmbeddingError> {
        let n = l2(&v);
        if n <= 0.0 || !n.is_finite() {
            return Err(EmbeddingError::Contract("cannot normalize a zero vector".into()));
        }
        Self::new(v.into_iter().map(|x| (f64::from(x) / n) as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn cosine(&self, other: &Embedding) -> Result<f64, EmbeddingError> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::Contract(format!("dimension mismatch: {} vs {}", self.dim(), other.dim())));
        }
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for (a, b) in self.0.iter().zip(&other.0) {
            let (a, b) = (f64::from(*a), f64::from(*b));
            dot += a * b;
            na += a * a;
            nb += b * b;
        }
        // sqrt(x * x) == x, so identical vectors give exactly 1.
        Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
    }
}

pub trait EmbeddingBackend: Send + Sync {
    /// Identifier echoed into reference indexes for provenance checks.
    fn model_id(&self) -> &str;
    fn embed_image(&self, encoded: &[u8]) -> Result<Embedding, EmbeddingError>;
    fn embed_text(&self, text: &str) -> Result<Embedding, EmbeddingError>;
}

/// Unit vector drawn from a ChaCha stream seeded by SHA-256 of the input.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    model_id: String,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim, model_id: format!("stub-sha256-{dim}") }
    }

    fn embed_bytes(&self, domain: &[u8], bytes: &[u8]) -> Result<Embedding, EmbeddingError> {
        let mut h = Sha256::new();
        h.update(domain);
        h.update(bytes);
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let v: Vec<f32> = (0..self.dim)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x as f32
            })
            .collect();
        Embedding::normalized(v)
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_STUB_DIM)
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_image(&self, encoded: &[u8]) -> Result<Embedding, EmbeddingError> {
        self.embed_bytes(b"image\0", encoded)
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbeddingError> {
        self.embed_bytes(b"text\0", text.as_bytes())
    }
}

/// Returns the same vector for every input, so every similarity is 1.
#[derive(Debug, Clone)]
pub struct ConstantEmbedder {
    vector: Embedding,
}

impl ConstantEmbedder {
    pub fn new(dim: usize) -> Self {
        let mut v = vec![0.0; dim.max(1)];
        v[0] = 1.0;
        Self { vector: Embedding(v) }
    }
}

impl EmbeddingBackend for ConstantEmbedder {
    fn model_id(&self) -> &str {
        "stub-constant"
    }

    fn embed_image(&self, _: &[u8]) -> Result<Embedding, EmbeddingError> {
        Ok(self.vector.clone())
    }

    fn embed_text(&self, _: &str) -> Result<Embedding, EmbeddingError> {
        Ok(self.vector.clone())
    }
}

#[derive(Debug, Serialize)]
struct ImageRequest<'a> {
    image_b64: &'a str,
}

#[derive(Debug, Serialize)]
struct TextRequest<'a> {
    text: &'a str,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    embedding: Vec<f32>,
    dim: usize,
    model: String,
}

#[derive(Debug, Deserialize)]
pub struct Health {
    pub status: String,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub dim: Option<usize>,
}

/// Client for the encoder sidecar (`/v1/embed/image`, `/v1/embed/text`, `/healthz`).
pub struct SidecarClient {
    base_url: String,
    model_id: String,
    agent: ureq::Agent,
}

impl SidecarClient {
    /// `model_id` is the pinned encoder; any response naming another model is rejected.
    pub fn new(base_url: &str, model_id: &str) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(60))).build().new_agent();
        Self { base_url: base_url.trim_end_matches('/').to_string(), model_id: model_id.to_string(), agent }
    }

    pub fn health(&self) -> Result<Health, EmbeddingError> {
        let mut resp = self
            .agent
            .get(format!("{}/healthz", self.base_url))
            .config()
            .http_status_as_error(false)
            .build()
            .call()
            .map_err(|e| EmbeddingError::Backend(e.to_string()))?;
        resp.body_mut().read_json::<Health>().map_err(|e| EmbeddingError::Backend(format!("bad health body: {e}")))
    }

    fn post<T: Serialize>(&self, route: &str, body: &T) -> Result<Embedding, EmbeddingError> {
        let url = format!("{}{route}", self.base_url);
        let mut resp =
            self.agent.post(&url).send_json(body).map_err(|e| EmbeddingError::Backend(format!("{url}: {e}")))?;
        let parsed: EmbedResponse =
            resp.body_mut().read_json().map_err(|e| EmbeddingError::Backend(format!("{url}: bad body: {e}")))?;
        if parsed.model != self.model_id {
            return Err(EmbeddingError::ModelMismatch { expected: self.model_id.clone(), actual: parsed.model });
        }
        if parsed.embedding.len() != parsed.dim {
            return Err(EmbeddingError::Contract(format!(
                "sidecar reported dim {} but sent {} values",
                parsed.dim,
                parsed.embedding.len()
            )));
        }
        Embedding::new(parsed.embedding)
    }
}

impl EmbeddingBackend for SidecarClient {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn embed_image(&self, encoded: &[u8]) -> Result<Embedding, EmbeddingError> {
        let b64 = BASE64.encode(encoded);
        self.post("/v1/embed/image", &ImageRequest { image_b64: &b64 })
    }

    fn embed_text(&self, text: &str) -> Result<Embedding, EmbeddingError> {
        self.post("/v1/embed/text", &TextRequest { text })
    }
}
