use std::path::Path;

use image::{imageops, RgbImage};
use serde::{Deserialize, Serialize};

use super::{read_text, IngestError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionKind {
    Vehicle,
    Plate,
}

/// Pixel box `(x, y, w, h)` with `w, h >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl From<[u32; 4]> for BBox {
    fn from([x, y, w, h]: [u32; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn full(width: u32, height: u32) -> Self {
        Self { x: 0, y: 0, w: width, h: height }
    }

    /// Intersects a possibly out-of-frame, fractional box with the frame.
    /// `None` when nothing of it remains.
    pub fn clamped(x: f64, y: f64, w: f64, h: f64, width: u32, height: u32) -> Option<Self> {
        if ![x, y, w, h].iter().all(|v| v.is_finite()) {
            return None;
        }
        let x0 = x.floor().max(0.0);
        let y0 = y.floor().max(0.0);
        let x1 = (x + w).ceil().min(f64::from(width));
        let y1 = (y + h).ceil().min(f64::from(height));
        (x1 > x0 && y1 > y0).then_some(Self { x: x0 as u32, y: y0 as u32, w: (x1 - x0) as u32, h: (y1 - y0) as u32 })
    }

    pub fn clamp_to(self, width: u32, height: u32) -> Option<Self> {
        Self::clamped(f64::from(self.x), f64::from(self.y), f64::from(self.w), f64::from(self.h), width, height)
    }

    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }
}

/// A detection as supplied by a manifest or an external detector file;
/// coordinates may be fractional or run past the frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetection {
    pub frame_index: usize,
    pub kind: DetectionKind,
    pub bbox: [f64; 4],
    #[serde(default = "full_confidence")]
    pub confidence: f64,
}

fn full_confidence() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame_index: usize,
    pub kind: DetectionKind,
    pub bbox: BBox,
    pub confidence: f64,
}

pub trait Detector: Send + Sync {
    fn name(&self) -> &str;
    fn propose(&self, frames: &[RgbImage]) -> Result<Vec<RawDetection>, IngestError>;
}

/// Replays stored ground-truth boxes at confidence 1.
#[derive(Debug, Clone, Default)]
pub struct AnnotationDetector {
    boxes: Vec<RawDetection>,
}

impl AnnotationDetector {
    pub fn new(boxes: Vec<RawDetection>) -> Self {
        Self { boxes }
    }
}

impl Detector for AnnotationDetector {
    fn name(&self) -> &str {
        "annotation"
    }

    fn propose(&self, _: &[RgbImage]) -> Result<Vec<RawDetection>, IngestError> {
        Ok(self.boxes.iter().map(|b| RawDetection { confidence: 1.0, ..b.clone() }).collect())
    }
}

/// One plate box covering each whole frame.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullFrameDetector;

impl Detector for FullFrameDetector {
    fn name(&self) -> &str {
        "fullframe"
    }

    fn propose(&self, frames: &[RgbImage]) -> Result<Vec<RawDetection>, IngestError> {
        Ok(frames
            .iter()
            .enumerate()
            .map(|(i, f)| RawDetection {
                frame_index: i,
                kind: DetectionKind::Plate,
                bbox: [0.0, 0.0, f64::from(f.width()), f64::from(f.height())],
                confidence: 1.0,
            })
            .collect())
    }
}

/// Detections written by an out-of-process detector, one JSON object per line.
#[derive(Debug, Clone, Default)]
pub struct ExternalDetections {
    rows: Vec<RawDetection>,
}

impl ExternalDetections {
    pub fn load(path: &Path) -> Result<Self, IngestError> {
        Self::parse(&read_text(path)?)
            .map_err(|reason| IngestError::Schema { path: path.display().to_string(), reason })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let rows = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| serde_json::from_str(l).map_err(|e| format!("line {}: {e}", n + 1)))
            .collect::<Result<_, _>>()?;
        Ok(Self { rows })
    }
}

impl Detector for ExternalDetections {
    fn name(&self) -> &str {
        "external"
    }

    fn propose(&self, _: &[RgbImage]) -> Result<Vec<RawDetection>, IngestError> {
        Ok(self.rows.clone())
    }
}

/// Runs `provider`, clamps every box to its frame and sorts by
/// `(frame_index, kind)`; ties keep provider order.
pub fn detect(provider: &dyn Detector, frames: &[RgbImage]) -> Result<Vec<Detection>, IngestError> {
    let mut out = Vec::new();
    for raw in provider.propose(frames)? {
        let fail = |reason: String| IngestError::Detector { frame_index: raw.frame_index, reason };
        let frame = frames.get(raw.frame_index).ok_or_else(|| fail(format!("{} frames available", frames.len())))?;
        if !(0.0..=1.0).contains(&raw.confidence) {
            return Err(fail(format!("confidence {} outside [0, 1]", raw.confidence)));
        }
        let [x, y, w, h] = raw.bbox;
        match BBox::clamped(x, y, w, h, frame.width(), frame.height()) {
            Some(bbox) => {
                out.push(Detection { frame_index: raw.frame_index, kind: raw.kind, bbox, confidence: raw.confidence })
            }
            None => log::warn!(
                "{}: box {:?} on frame {} lies outside the frame",
                provider.name(),
                raw.bbox,
                raw.frame_index
            ),
        }
    }
    out.sort_by_key(|d| (d.frame_index, d.kind));
    Ok(out)
}

/// Pixel-exact sub-image after clamping `bbox` to the frame.
pub fn crop(frame: &RgbImage, bbox: BBox) -> Result<RgbImage, IngestError> {
    let b = bbox.clamp_to(frame.width(), frame.height()).ok_or_else(|| {
        IngestError::Crop(format!("{bbox:?} has no area inside {}x{}", frame.width(), frame.height()))
    })?;
    Ok(imageops::crop_imm(frame, b.x, b.y, b.w, b.h).to_image())
}

#[derive(Debug, Clone)]
pub struct LabeledCrop {
    pub frame_index: usize,
    pub kind: DetectionKind,
    pub image: RgbImage,
}

#[derive(Debug, Clone)]
pub struct CropSet {
    pub sample_id: String,
    pub crops: Vec<LabeledCrop>,
}

impl CropSet {
    pub fn build(sample_id: &str, frames: &[RgbImage], detections: &[Detection]) -> Result<Self, IngestError> {
        let crops = detections
            .iter()
            .map(|d| {
                let frame = frames.get(d.frame_index).ok_or_else(|| IngestError::Detector {
                    frame_index: d.frame_index,
                    reason: "detection without a frame".into(),
                })?;
                Ok(LabeledCrop { frame_index: d.frame_index, kind: d.kind, image: crop(frame, d.bbox)? })
            })
            .collect::<Result<_, IngestError>>()?;
        Ok(Self { sample_id: sample_id.to_string(), crops })
    }

    pub fn of_kind(&self, kind: DetectionKind) -> impl Iterator<Item = &LabeledCrop> {
        self.crops.iter().filter(move |c| c.kind == kind)
    }
}
