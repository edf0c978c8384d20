//! No-reference frame quality: BRISQUE and CLIP-IQA scoring plus ranking.

pub mod brisque;
pub mod mscn;
pub mod nss;
pub mod plane;
pub mod ranking;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{Embedding, EmbeddingError, UNIT_TOLERANCE};

pub use brisque::{brisque_features, brisque_score, BrisqueFeatures, Kernel, SvrModel};
pub use mscn::{mscn, MscnField};
pub use nss::{fit_aggd, fit_ggd, AggdFit, GgdFit};
pub use plane::LumaPlane;
pub use ranking::{rank_frames, FrameRanking, RankedFrame};

#[derive(Debug, Error)]
pub enum QualityError {
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("model load: {0}")]
    ModelLoad(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Brisque,
    ClipIqa,
}

impl Metric {
    pub fn label(self) -> &'static str {
        match self {
            Metric::Brisque => "BRISQUE",
            Metric::ClipIqa => "CLIP-IQA",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::ClipIqa)
    }
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "brisque" => Ok(Metric::Brisque),
            "clip_iqa" | "clipiqa" => Ok(Metric::ClipIqa),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub metric: Metric,
    pub value: f64,
    pub higher_is_better: bool,
}

impl QualityScore {
    pub fn new(metric: Metric, value: f64) -> Self {
        Self { metric, value, higher_is_better: metric.higher_is_better() }
    }
}

/// Default positive/negative quality prompts.
pub const POSITIVE_PROMPT: &str = "a high-quality photo";
pub const NEGATIVE_PROMPT: &str = "a blurry image";

/// Logit scale applied to cosines in antonym mode.
pub const CLIP_TEMPERATURE: f64 = 100.0;

fn check_unit(e: &Embedding) -> Result<(), QualityError> {
    let n: f64 = e.as_slice().iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(QualityError::Contract(format!("embedding norm {n} is not unit")));
    }
    Ok(())
}

/// CLIP-IQA. With a negative prompt the result is the positive-class
/// probability of a two-way softmax over `100 * cos`; otherwise the clamped
/// cosine to the positive prompt.
pub fn clip_iqa(
    image: &Embedding,
    positive: &Embedding,
    negative: Option<&Embedding>,
) -> Result<QualityScore, QualityError> {
    check_unit(image)?;
    check_unit(positive)?;
    let cos_pos = image.cosine(positive).map_err(|e| QualityError::Contract(e.to_string()))?;
    let value = match negative {
        None => cos_pos.clamp(0.0, 1.0),
        Some(neg) => {
            check_unit(neg)?;
            let cos_neg = image.cosine(neg).map_err(|e| QualityError::Contract(e.to_string()))?;
            // Logistic form of the two-class softmax; stable for any gap.
            1.0 / (1.0 + (CLIP_TEMPERATURE * (cos_neg - cos_pos)).exp())
        }
    };
    Ok(QualityScore::new(Metric::ClipIqa, value))
}
