//! Vision-language recognition of license plates and vehicle make/model from
//! traffic-video frames.
//!
//! The pipeline ranks frames by perceptual quality, composites the best plate
//! crops, queries a vision-language model with templated prompts and can
//! revise make/model answers through a retrieval-gated second query. Every
//! provider call can be recorded to and replayed from a cassette, so whole
//! runs are reproducible offline.

pub mod compositing;
pub mod config;
pub mod embedding;
pub mod eval;
pub mod ingestion;
pub mod pipeline;
pub mod prompts;
pub mod quality;
pub mod reflection;
pub mod vlm;

pub use compositing::{CompositeImage, CompositeSpec, Layout};
pub use config::PipelineConfig;

pub use embedding::{Embedding, EmbeddingBackend};
pub use prompts::{CarOption, CarOptions, TemplateSet};
pub use quality::{FrameRanking, LumaPlane, Metric, QualityScore};
pub use vlm::{normalize_plate, ChatRequest, ChatResponse, PredictionSet, Strategy, VlmProvider};
