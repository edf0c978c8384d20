//! Sample manifests, UFPR-style annotations, detections and crops.

mod detection;

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vlm::normalize_plate;

pub use detection::{
    crop, detect, AnnotationDetector, BBox, CropSet, Detection, DetectionKind, Detector, ExternalDetections,
    FullFrameDetector, LabeledCrop, RawDetection,
};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("manifest {path}: {reason}")]
    Schema { path: String, reason: String },
    #[error("annotation {path}: {reason}")]
    Annotation { path: String, reason: String },
    #[error("decoding frame {path}: {source}")]
    Image { path: String, source: image::ImageError },
    #[error("detector failed on frame {frame_index}: {reason}")]
    Detector { frame_index: usize, reason: String },
    #[error("crop: {0}")]
    Crop(String),
}

fn read_text(path: &Path) -> Result<String, IngestError> {
    fs::read_to_string(path).map_err(|source| IngestError::Io { path: path.display().to_string(), source })
}

#[derive(Debug, Clone, Default, Deserialize)]
struct GroundTruthJson {
    plate: Option<String>,
    make: Option<String>,
    model: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ManifestJson {
    sample_id: String,
    frames: Vec<PathBuf>,
    #[serde(default)]
    gt: GroundTruthJson,
    ocr_hint: Option<String>,
    #[serde(default)]
    detections: Vec<RawDetection>,
}

/// One sample: an ordered frame sequence plus optional ground truth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleManifest {
    pub sample_id: String,
    /// Absolute, or relative paths resolved against the manifest directory.
    pub frame_paths: Vec<PathBuf>,
    pub gt_plate: Option<String>,
    pub gt_make: Option<String>,
    pub gt_model: Option<String>,
    pub ocr_hint: Option<String>,
    /// Boxes served by the `annotation` detector.
    pub detections: Vec<RawDetection>,
}

fn non_blank(s: Option<String>) -> Option<String> {
    s.map(|v| v.trim().to_string()).filter(|v| !v.is_empty())
}

pub fn load_manifest(path: &Path) -> Result<SampleManifest, IngestError> {
    let schema = |reason: String| IngestError::Schema { path: path.display().to_string(), reason };
    let raw: ManifestJson = serde_json::from_str(&read_text(path)?).map_err(|e| schema(e.to_string()))?;
    if raw.sample_id.trim().is_empty() {
        return Err(schema("sample_id is empty".into()));
    }
    if raw.frames.is_empty() {
        return Err(schema("frame list is empty".into()));
    }
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let frame_paths = raw.frames.iter().map(|p| if p.is_absolute() { p.clone() } else { base.join(p) }).collect();
    let gt_plate = match non_blank(raw.gt.plate) {
        Some(p) => {
            let n = normalize_plate(&p);
            if n.is_empty() {
                return Err(schema(format!("gt plate {p:?} has no alphanumerics")));
            }
            Some(n)
        }
        None => None,
    };
    for d in &raw.detections {
        if d.frame_index >= raw.frames.len() {
            return Err(schema(format!("detection references frame {} of {}", d.frame_index, raw.frames.len())));
        }
    }
    Ok(SampleManifest {
        sample_id: raw.sample_id.trim().to_string(),
        frame_paths,
        gt_plate,
        gt_make: non_blank(raw.gt.make),
        gt_model: non_blank(raw.gt.model),
        ocr_hint: non_blank(raw.ocr_hint),
        detections: raw.detections,
    })
}

impl SampleManifest {
    /// Decodes every frame in index order.
    pub fn load_frames(&self) -> Result<Vec<RgbImage>, IngestError> {
        self.frame_paths
            .iter()
            .map(|p| {
                image::open(p).map(|img| img.to_rgb8()).map_err(|source| match source {
                    image::ImageError::IoError(e) => IngestError::Io { path: p.display().to_string(), source: e },
                    other => IngestError::Image { path: p.display().to_string(), source: other },
                })
            })
            .collect()
    }
}

/// Fields recovered from a per-image `key: value` annotation file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UfprAnnotation {
    pub plate: String,
    pub plate_bbox: Option<BBox>,
    pub vehicle_bbox: Option<BBox>,
    pub make: Option<String>,
    pub model: Option<String>,
}

fn parse_box(value: &str) -> Option<BBox> {
    let nums: Vec<u32> = value.split_whitespace().map(str::parse).collect::<Result<_, _>>().ok()?;
    match nums[..] {
        [x, y, w, h] if w > 0 && h > 0 => Some(BBox { x, y, w, h }),
        _ => None,
    }
}

pub fn load_ufpr_annotation(path: &Path) -> Result<UfprAnnotation, IngestError> {
    parse_ufpr_annotation(&read_text(path)?)
        .map_err(|reason| IngestError::Annotation { path: path.display().to_string(), reason })
}

/// Unknown keys and malformed boxes are skipped; only a missing plate fails.
pub fn parse_ufpr_annotation(text: &str) -> Result<UfprAnnotation, String> {
    let mut out = UfprAnnotation::default();
    let mut plate = None;
    for line in text.lines() {
        let Some((key, value)) = line.split_once(':') else { continue };
        let value = value.trim();
        match key.trim().to_ascii_lowercase().as_str() {
            "plate" => plate = Some(normalize_plate(value)),
            "position_plate" => out.plate_bbox = parse_box(value),
            "position_vehicle" => out.vehicle_bbox = parse_box(value),
            "make" if !value.is_empty() => out.make = Some(value.to_string()),
            "model" if !value.is_empty() => out.model = Some(value.to_string()),
            _ => {}
        }
    }
    match plate {
        Some(p) if !p.is_empty() => {
            out.plate = p;
            Ok(out)
        }
        Some(_) => Err("plate value has no alphanumerics".into()),
        None => Err("no `plate` key".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn manifest_normalizes_plate_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.json",
            r#"{"sample_id":"s1","frames":["a.png","b.png","/abs/c.png"],"gt":{"plate":"abc-1234"}}"#,
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.gt_plate.as_deref(), Some("ABC1234"));
        assert_eq!(m.ocr_hint, None);
        assert_eq!(m.frame_paths[0], dir.path().join("a.png"));
        assert_eq!(m.frame_paths[2], PathBuf::from("/abs/c.png"));
        assert_eq!(load_manifest(&p).unwrap(), m);
    }

    #[test]
    fn manifest_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        for body in [
            r#"{"frames":["a.png"]}"#,
            r#"{"sample_id":"s","frames":[]}"#,
            r#"{"sample_id":"  ","frames":["a.png"]}"#,
            r#"{"sample_id":"s","frames":["a.png"],"detections":[{"frame_index":3,"kind":"plate","bbox":[0,0,1,1]}]}"#,
        ] {
            let p = write(dir.path(), "m.json", body);
            assert!(matches!(load_manifest(&p), Err(IngestError::Schema { .. })), "{body}");
        }
        assert!(matches!(load_manifest(&dir.path().join("missing.json")), Err(IngestError::Io { .. })));
    }

    #[test]
    fn ufpr_annotation_parsing() {
        let text = "camera: GoPro\nposition_vehicle: 809 414 228 386\nmake: Renault\nplate: ABC-1234\n\
                    position_plate: 879 681 77 27\nchar 1: 880 685 8 13\nnonsense line\n";
        let a = parse_ufpr_annotation(text).unwrap();
        assert_eq!(a.plate, "ABC1234");
        assert_eq!(a.plate_bbox, Some(BBox { x: 879, y: 681, w: 77, h: 27 }));
        assert_eq!(a.vehicle_bbox, Some(BBox { x: 809, y: 414, w: 228, h: 386 }));
        assert_eq!(a.make.as_deref(), Some("Renault"));
        assert_eq!(parse_ufpr_annotation("plate: ABC-1234").unwrap().plate, "ABC1234");
        assert!(parse_ufpr_annotation("type: car\nmake: Fiat").is_err());
        assert!(parse_ufpr_annotation("plate: ---").is_err());
    }
}
