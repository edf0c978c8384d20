//! Pipeline configuration: a JSON file with defaults for every field.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{ConstantEmbedder, EmbeddingBackend, HashEmbedder, SidecarClient, DEFAULT_STUB_DIM};
use crate::quality::Metric;
use crate::reflection::{ReflectionMode, DEFAULT_CELL, DEFAULT_THRESHOLD};
use crate::vlm::{HttpProviderConfig, RetryPolicy, Strategy};

#[derive(Debug, Error)]
#[error("config: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    Live,
    Record,
    Replay,
    #[default]
    Stub,
}

impl FromStr for ProviderMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "live" => Ok(ProviderMode::Live),
            "record" => Ok(ProviderMode::Record),
            "replay" => Ok(ProviderMode::Replay),
            "stub" => Ok(ProviderMode::Stub),
            other => Err(format!("unknown provider mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSettings {
    pub mode: ProviderMode,
    pub base_url: String,
    pub model_id: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub cassette: Option<PathBuf>,
    pub stub_script: Option<PathBuf>,
    pub max_concurrency: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_s: u64,
}

impl Default for ProviderSettings {
    fn default() -> Self {
        Self {
            mode: ProviderMode::Stub,
            base_url: "https://api.openai.com/v1".into(),
            model_id: "gpt-4o".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            cassette: None,
            stub_script: None,
            max_concurrency: 4,
            temperature: 0.2,
            max_tokens: 200,
            timeout_s: 60,
        }
    }
}

impl ProviderSettings {
    pub fn http_config(&self) -> HttpProviderConfig {
        HttpProviderConfig {
            base_url: self.base_url.clone(),
            api_key_env: Some(self.api_key_env.clone()).filter(|s| !s.is_empty()),
            max_concurrency: self.max_concurrency,
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(self.timeout_s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// SHA-256-seeded pseudo-random unit vectors.
    #[default]
    Stub,
    /// One vector for every input; every similarity is 1.
    Constant,
    Sidecar,
}

impl FromStr for EmbeddingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "stub" => Ok(EmbeddingKind::Stub),
            "constant" => Ok(EmbeddingKind::Constant),
            "sidecar" => Ok(EmbeddingKind::Sidecar),
            other => Err(format!("unknown embedding backend {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSettings {
    pub backend: EmbeddingKind,
    pub url: String,
    /// Model the sidecar must report.
    pub model_id: String,
    /// Stub vector length.
    pub dim: usize,
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        Self {
            backend: EmbeddingKind::Stub,
            url: "http://127.0.0.1:8765".into(),
            model_id: "openai/clip-vit-base-patch32".into(),
            dim: DEFAULT_STUB_DIM,
        }
    }
}

impl EmbeddingSettings {
    pub fn build(&self) -> Box<dyn EmbeddingBackend> {
        match self.backend {
            EmbeddingKind::Stub => Box::new(HashEmbedder::new(self.dim)),
            EmbeddingKind::Constant => Box::new(ConstantEmbedder::new(self.dim)),
            EmbeddingKind::Sidecar => Box::new(SidecarClient::new(&self.url, &self.model_id)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    #[default]
    Annotation,
    Fullframe,
    External,
}

impl FromStr for DetectorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "annotation" => Ok(DetectorKind::Annotation),
            "fullframe" | "full_frame" => Ok(DetectorKind::Fullframe),
            "external" => Ok(DetectorKind::External),
            other => Err(format!("unknown detector {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub metric: Metric,
    /// Frames kept for the plate composite.
    pub k: usize,
    pub strategy: Strategy,
    pub provider: ProviderSettings,
    pub embedding: EmbeddingSettings,
    pub threshold: f64,
    pub reflection: ReflectionMode,
    pub index: Option<PathBuf>,
    /// Car options JSON; defaults to the index classes.
    pub options: Option<PathBuf>,
    pub template_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// BRISQUE regressor; the bundled LIVE model when absent.
    pub svr_model: Option<PathBuf>,
    pub detector: DetectorKind,
    /// JSON-lines boxes for the external detector.
    pub detections: Option<PathBuf>,
    /// Overrides the manifest OCR hint.
    pub ocr_hint: Option<String>,
    /// Samples processed concurrently.
    pub workers: usize,
    pub reference_cell: (u32, u32),
    pub binary_reference: bool,
    /// Frames per audit grid.
    pub grid_n: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Brisque,
            k: 3,
            strategy: Strategy::SingleCall,
            provider: ProviderSettings::default(),
            embedding: EmbeddingSettings::default(),
            threshold: DEFAULT_THRESHOLD,
            reflection: ReflectionMode::Off,
            index: None,
            options: None,
            template_dir: None,
            output_dir: PathBuf::from("out"),
            svr_model: None,
            detector: DetectorKind::Annotation,
            detections: None,
            ocr_hint: None,
            workers: 2,
            reference_cell: DEFAULT_CELL,
            binary_reference: false,
            grid_n: 10,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_provider()?;
        self.validate_pipeline()
    }

    pub fn validate_provider(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError(m.to_string()));
        match self.provider.mode {
            ProviderMode::Replay | ProviderMode::Record if self.provider.cassette.is_none() => {
                fail("replay and record modes require a cassette path")
            }
            ProviderMode::Stub if self.provider.stub_script.is_none() => fail("stub mode requires a stub script"),
            _ => Ok(()),
        }
    }

    /// Everything except the provider settings.
    pub fn validate_pipeline(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError(m.to_string()));
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if self.workers == 0 || self.provider.max_concurrency == 0 {
            return fail("workers and max_concurrency must be at least 1");
        }
        if !self.threshold.is_finite() || self.threshold < 0.0 {
            return fail("threshold must be a finite non-negative number");
        }
        if self.reflection != ReflectionMode::Off && self.index.is_none() {
            return fail("reflection requires an index path");
        }
        if self.detector == DetectorKind::External && self.detections.is_none() {
            return fail("the external detector requires a detections file");
        }
        if self.grid_n == 0 {
            return fail("grid_n must be at least 1");
        }
        Ok(())
    }
}
