//! Retrieval-gated self-reflection for make/model answers.
//!
//! The initial guess selects a reference image from a per-class index. The
//! query and reference embeddings are compared; when the clamped cosine falls
//! below the threshold (or unconditionally in [`ReflectionMode::Always`]) the
//! model is shown both images side by side and asked to confirm or revise.
//! A revision is kept only when it names one of the allowed options.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, GenericImageView, Luma, Rgb, RgbImage, Rgba};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compositing::{compose_pair, encode_png, fit_into, CompositeError, CompositeSpec, LabeledImage, WHITE};
use crate::embedding::{Embedding, EmbeddingBackend, EmbeddingError};
use crate::prompts::{CarOption, CarOptions, PromptError, TemplateSet};
use crate::vlm::{parse_candidates, ChatRequest, ChatResponse, Strategy, TaskKind, VlmError, VlmProvider};

/// Separator between make and model in reference class directory names.
pub const CLASS_SEPARATOR: &str = "__";
pub const DEFAULT_THRESHOLD: f64 = 0.80;
pub const DEFAULT_CELL: (u32, u32) = (224, 224);
/// Channel value at or above which an opaque pixel counts as background.
pub const NEAR_WHITE: u8 = 250;
const BINARY_CUTOFF: u8 = 128;
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Error)]
pub enum ReflectionError {
    #[error("reading {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("reference class {class}: {reason}")]
    Class { class: String, reason: String },
    #[error("reference index: {0}")]
    Index(String),
    #[error("no reference for {0}")]
    Retrieval(String),
    #[error("invalid threshold {0}")]
    Threshold(f64),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Composite(#[from] CompositeError),
    #[error(transparent)]
    Vlm(#[from] VlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionMode {
    Off,
    #[default]
    Gated,
    Always,
}

impl FromStr for ReflectionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "off" | "none" => Ok(ReflectionMode::Off),
            "gated" => Ok(ReflectionMode::Gated),
            "always" | "always_reflect" => Ok(ReflectionMode::Always),
            other => Err(format!("unknown reflection mode {other:?}")),
        }
    }
}

impl fmt::Display for ReflectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReflectionMode::Off => "off",
            ReflectionMode::Gated => "gated",
            ReflectionMode::Always => "always",
        })
    }
}

/// Cosine similarity clamped into `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityScore(f64);

impl SimilarityScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn similarity(query: &Embedding, reference: &Embedding) -> Result<SimilarityScore, ReflectionError> {
    Ok(SimilarityScore(query.cosine(reference)?.clamp(0.0, 1.0)))
}

/// Case-insensitive, trimmed exact match returning the canonical option.
pub fn validate_option(answer: &CarOption, options: &CarOptions) -> Option<CarOption> {
    options.find(answer).cloned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub make: String,
    pub model: String,
    pub image_path: PathBuf,
    pub embedding: Embedding,
}

impl ReferenceEntry {
    pub fn option(&self) -> CarOption {
        CarOption::new(&self.make, &self.model)
    }
}

/// One embedded reference image per make/model class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceIndex {
    pub embedding_dim: usize,
    pub cell: (u32, u32),
    #[serde(default)]
    pub binary: bool,
    #[serde(default)]
    pub embedding_model: Option<String>,
    pub entries: Vec<ReferenceEntry>,
}

/// Tight box around pixels that are neither transparent nor near-white.
fn content_bounds(img: &image::RgbaImage) -> Option<(u32, u32, u32, u32)> {
    let mut b: Option<(u32, u32, u32, u32)> = None;
    for (x, y, p) in img.enumerate_pixels() {
        let Rgba([r, g, bl, a]) = *p;
        if a == 0 || (r >= NEAR_WHITE && g >= NEAR_WHITE && bl >= NEAR_WHITE) {
            continue;
        }
        b = Some(match b {
            None => (x, y, x, y),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
        });
    }
    b
}

/// Crops to content, flattens onto white, converts to grayscale (or binary)
/// and letterboxes into `cell`.
pub fn preprocess_reference(img: &DynamicImage, cell: (u32, u32), binary: bool) -> Option<RgbImage> {
    let rgba = img.to_rgba8();
    let (x0, y0, x1, y1) = content_bounds(&rgba)?;
    let cropped = rgba.view(x0, y0, x1 - x0 + 1, y1 - y0 + 1).to_image();
    let gray = image::GrayImage::from_fn(cropped.width(), cropped.height(), |x, y| {
        let Rgba([r, g, b, a]) = *cropped.get_pixel(x, y);
        let alpha = f64::from(a) / 255.0;
        let luma = 0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b);
        let v = (luma * alpha + 255.0 * (1.0 - alpha)).round() as u8;
        Luma([if binary {
            if v < BINARY_CUTOFF {
                0
            } else {
                255
            }
        } else {
            v
        }])
    });
    let fitted = fit_into(&DynamicImage::ImageLuma8(gray).to_rgb8(), cell);
    let mut canvas = RgbImage::from_pixel(cell.0, cell.1, WHITE);
    let (ox, oy) = ((cell.0 - fitted.width()) / 2, (cell.1 - fitted.height()) / 2);
    image::imageops::replace(&mut canvas, &fitted, i64::from(ox), i64::from(oy));
    Some(canvas)
}

fn io_err(path: &Path, e: impl fmt::Display) -> ReflectionError {
    ReflectionError::Io { path: path.display().to_string(), reason: e.to_string() }
}

fn sorted_children(dir: &Path) -> Result<Vec<PathBuf>, ReflectionError> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| io_err(dir, e)))
        .collect::<Result<_, _>>()?;
    out.retain(|p| !p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.')));
    out.sort();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

impl ReferenceIndex {
    /// Builds the index from `root/Make__Model/*.{png,jpg}`, using the
    /// lexicographically first image of each class.
    pub fn build(
        root: &Path,
        backend: &dyn EmbeddingBackend,
        cell: (u32, u32),
        binary: bool,
    ) -> Result<Self, ReflectionError> {
        if cell.0 == 0 || cell.1 == 0 {
            return Err(ReflectionError::Index(format!("cell {cell:?} has zero area")));
        }
        let mut entries = Vec::new();
        for dir in sorted_children(root)?.into_iter().filter(|p| p.is_dir()) {
            let class = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            let fail = |reason: String| ReflectionError::Class { class: class.clone(), reason };
            let (make, model) = class
                .split_once(CLASS_SEPARATOR)
                .map(|(a, b)| (a.trim(), b.trim()))
                .filter(|(a, b)| !a.is_empty() && !b.is_empty())
                .ok_or_else(|| fail(format!("directory name is not Make{CLASS_SEPARATOR}Model")))?;
            let image_path =
                sorted_children(&dir)?.into_iter().find(|p| is_image(p)).ok_or_else(|| fail("no images".into()))?;
            let img = image::open(&image_path).map_err(|e| fail(format!("{}: {e}", image_path.display())))?;
            let prepared = preprocess_reference(&img, cell, binary)
                .ok_or_else(|| fail(format!("{} has no content pixels", image_path.display())))?;
            let embedding =
                backend.embed_image(&encode_png(&prepared)?).map_err(|e| fail(format!("embedding failed: {e}")))?;
            entries.push(ReferenceEntry { make: make.to_string(), model: model.to_string(), image_path, embedding });
        }
        let index = Self {
            embedding_dim: entries.first().map_or(0, |e| e.embedding.dim()),
            cell,
            binary,
            embedding_model: Some(backend.model_id().to_string()),
            entries,
        };
        index.validate()?;
        Ok(index)
    }

    fn validate(&self) -> Result<(), ReflectionError> {
        if self.entries.is_empty() {
            return Err(ReflectionError::Index("no classes".into()));
        }
        let mut seen = BTreeMap::new();
        for e in &self.entries {
            if e.embedding.dim() != self.embedding_dim {
                return Err(ReflectionError::Index(format!(
                    "{} {} has dimension {}, index declares {}",
                    e.make,
                    e.model,
                    e.embedding.dim(),
                    self.embedding_dim
                )));
            }
            if seen.insert(e.option().key(), ()).is_some() {
                return Err(ReflectionError::Index(format!("duplicate class {} {}", e.make, e.model)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ReflectionError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let index: Self =
            serde_json::from_str(&text).map_err(|e| ReflectionError::Index(format!("{}: {e}", path.display())))?;
        index.validate()?;
        Ok(index)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("index serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), ReflectionError> {
        fs::write(path, self.to_json()).map_err(|e| io_err(path, e))
    }

    /// Class set as car options.
    pub fn options(&self) -> Result<CarOptions, ReflectionError> {
        Ok(CarOptions::new(self.entries.iter().map(ReferenceEntry::option).collect())?)
    }

    /// Fails unless the index classes and `options` coincide.
    pub fn check_options(&self, options: &CarOptions) -> Result<(), ReflectionError> {
        let missing: Vec<String> =
            options.as_slice().iter().filter(|o| self.entry(o).is_none()).map(ToString::to_string).collect();
        let extra: Vec<String> = self
            .entries
            .iter()
            .map(ReferenceEntry::option)
            .filter(|o| !options.contains(o))
            .map(|o| o.to_string())
            .collect();
        if missing.is_empty() && extra.is_empty() {
            return Ok(());
        }
        Err(ReflectionError::Index(format!("classes differ from options: missing {missing:?}, extra {extra:?}")))
    }

    pub fn entry(&self, guess: &CarOption) -> Option<&ReferenceEntry> {
        let key = guess.key();
        self.entries.iter().find(|e| e.option().key() == key)
    }

    /// Stored entry plus its preprocessed reference image.
    pub fn retrieve_reference(&self, guess: &CarOption) -> Result<(RgbImage, &ReferenceEntry), ReflectionError> {
        let entry = self.entry(guess).ok_or_else(|| ReflectionError::Retrieval(guess.to_string()))?;
        let img = image::open(&entry.image_path).map_err(|e| io_err(&entry.image_path, e))?;
        let prepared = preprocess_reference(&img, self.cell, self.binary).ok_or_else(|| ReflectionError::Class {
            class: guess.to_string(),
            reason: "reference image lost its content pixels".into(),
        })?;
        Ok((prepared, entry))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionOutcome {
    pub initial: CarOption,
    pub score: SimilarityScore,
    pub threshold: f64,
    pub second_query_issued: bool,
    pub revised: Option<CarOption>,
    #[serde(rename = "final")]
    pub final_answer: CarOption,
    /// First-round call plus the optional second query.
    pub vlm_calls: u32,
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<ChatResponse>,
}

impl ReflectionOutcome {
    fn unchanged(initial: &CarOption, score: f64, threshold: f64, degraded: bool) -> Self {
        Self {
            initial: initial.clone(),
            score: SimilarityScore(score),
            threshold,
            second_query_issued: false,
            revised: None,
            final_answer: initial.clone(),
            vlm_calls: 1,
            degraded,
            response: None,
        }
    }
}

/// Everything a reflection round needs besides the per-sample inputs.
pub struct Reflector<'a> {
    pub index: &'a ReferenceIndex,
    pub backend: &'a dyn EmbeddingBackend,
    pub templates: &'a TemplateSet,
    pub options: &'a CarOptions,
    pub threshold: f64,
    pub mode: ReflectionMode,
    /// Model, temperature and token limit for the second query.
    pub request: ChatRequest,
}

impl Reflector<'_> {
    /// Runs one reflection round. Retrieval and embedding failures degrade to
    /// the initial answer; provider failures on the second query propagate.
    /// [`ReflectionMode::Off`] never issues a second query.
    pub fn reflect<P: VlmProvider + ?Sized>(
        &self,
        query: &RgbImage,
        initial: &CarOption,
        provider: &P,
    ) -> Result<ReflectionOutcome, ReflectionError> {
        if !self.threshold.is_finite() || self.threshold < 0.0 {
            return Err(ReflectionError::Threshold(self.threshold));
        }
        let (reference, score) = match self.score(query, initial) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("reflection for {initial} skipped: {e}");
                return Ok(ReflectionOutcome::unchanged(initial, 0.0, self.threshold, true));
            }
        };
        let issue = match self.mode {
            ReflectionMode::Off => false,
            ReflectionMode::Gated => score.value() < self.threshold,
            ReflectionMode::Always => true,
        };
        if !issue {
            return Ok(ReflectionOutcome::unchanged(initial, score.value(), self.threshold, false));
        }
        let composite = compose_pair(
            &LabeledImage::new("query", query.clone()),
            &LabeledImage::new(initial.to_string(), reference),
            &CompositeSpec::pair_red_bar(),
        )?;
        let prompt = self.templates.render_reflection_prompt(initial, score.value(), self.threshold, self.options)?;
        let request = ChatRequest {
            prompt_text: prompt,
            images: vec![composite.to_png()?],
            call_ordinal: 0,
            ..self.request.clone()
        };
        let response = provider.complete(&request)?;
        let revised =
            parse_candidates(&response.raw_text, Strategy::SingleCall, TaskKind::Mmr { options: Some(self.options) })
                .into_iter()
                .find_map(|c| c.as_vehicle().cloned());
        let validated = revised.as_ref().and_then(|r| validate_option(r, self.options));
        if revised.is_some() && validated.is_none() {
            log::warn!("revision {:?} is not among the options; keeping {initial}", revised);
        }
        Ok(ReflectionOutcome {
            initial: initial.clone(),
            score,
            threshold: self.threshold,
            second_query_issued: true,
            final_answer: validated.unwrap_or_else(|| initial.clone()),
            revised,
            vlm_calls: 2,
            degraded: false,
            response: Some(response),
        })
    }

    fn score(&self, query: &RgbImage, initial: &CarOption) -> Result<(RgbImage, SimilarityScore), ReflectionError> {
        let (reference, entry) = self.index.retrieve_reference(initial)?;
        let q = self.backend.embed_image(&encode_png(query)?)?;
        Ok((reference, similarity(&q, &entry.embedding)?))
    }
}

/// Solid-colour helper for fixtures: an opaque `colour` rectangle on a
/// transparent canvas.
pub fn masked_fixture(width: u32, height: u32, rect: (u32, u32, u32, u32), colour: [u8; 3]) -> image::RgbaImage {
    let (x0, y0, w, h) = rect;
    image::RgbaImage::from_fn(width, height, |x, y| {
        if (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y) {
            let Rgb([r, g, b]) = Rgb(colour);
            Rgba([r, g, b, 255])
        } else {
            Rgba([0, 0, 0, 0])
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{ConstantEmbedder, HashEmbedder};
    use crate::vlm::ScriptedProvider;

    fn e(v: &[f32]) -> Embedding {
        Embedding::normalized(v.to_vec()).unwrap()
    }

    fn options() -> CarOptions {
        CarOptions::new(vec![
            CarOption::new("Ford", "Fiesta"),
            CarOption::new("Ford", "Ka"),
            CarOption::new("Nissan", "Rogue"),
            CarOption::new("Renault", "Sandero"),
        ])
        .unwrap()
    }

    fn refset(dir: &Path) {
        for (i, o) in options().as_slice().iter().enumerate() {
            let class = dir.join(format!("{}{CLASS_SEPARATOR}{}", o.make, o.model));
            fs::create_dir_all(&class).unwrap();
            let c = (i as u8) * 40;
            masked_fixture(40, 30, (5 + i as u32, 4, 20, 12), [c, 90, 200 - c]).save(class.join("b.png")).unwrap();
            masked_fixture(40, 30, (1, 1, 3, 3), [0, 0, 0]).save(class.join("z.png")).unwrap();
        }
    }

    fn reflector<'a>(
        index: &'a ReferenceIndex,
        backend: &'a dyn EmbeddingBackend,
        templates: &'a TemplateSet,
        options: &'a CarOptions,
        threshold: f64,
        mode: ReflectionMode,
    ) -> Reflector<'a> {
        Reflector { index, backend, templates, options, threshold, mode, request: ChatRequest::new("m", "", vec![]) }
    }

    #[test]
    fn similarity_examples() {
        let a = e(&[1.0, 0.0]);
        assert_eq!(similarity(&a, &a).unwrap().value(), 1.0);
        assert_eq!(similarity(&a, &e(&[0.0, 1.0])).unwrap().value(), 0.0);
        assert_eq!(similarity(&a, &e(&[-1.0, 0.0])).unwrap().value(), 0.0);
        assert!(similarity(&a, &e(&[1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn validate_option_examples() {
        let o = options();
        assert_eq!(validate_option(&CarOption::new("ford", "fiesta"), &o), Some(CarOption::new("Ford", "Fiesta")));
        assert_eq!(validate_option(&CarOption::new("Ford", "Focus"), &o), None);
        assert_eq!(validate_option(&CarOption::new("  Ford ", "Ka "), &o), Some(CarOption::new("Ford", "Ka")));
    }

    #[test]
    fn index_build_is_deterministic_and_complete() {
        let dir = tempfile::tempdir().unwrap();
        refset(dir.path());
        let backend = HashEmbedder::new(32);
        let a = ReferenceIndex::build(dir.path(), &backend, (64, 48), false).unwrap();
        let b = ReferenceIndex::build(dir.path(), &backend, (64, 48), false).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.entries.len(), 4);
        assert!(a.entries.iter().all(|x| x.image_path.ends_with("b.png")));
        a.check_options(&options()).unwrap();
        let path = dir.path().join("index.json");
        a.write(&path).unwrap();
        assert_eq!(ReferenceIndex::load(&path).unwrap(), a);
        let (img, entry) = a.retrieve_reference(&CarOption::new("nissan", "rogue")).unwrap();
        assert_eq!(img.dimensions(), (64, 48));
        assert_eq!(entry.model, "Rogue");
        assert!(matches!(a.retrieve_reference(&CarOption::new("Tesla", "X")), Err(ReflectionError::Retrieval(_))));
    }

    #[test]
    fn empty_and_transparent_classes_fail_by_name() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("Fiat__Uno")).unwrap();
        let err = ReferenceIndex::build(dir.path(), &HashEmbedder::new(8), DEFAULT_CELL, false).unwrap_err();
        assert!(err.to_string().contains("Fiat__Uno"), "{err}");
        image::RgbaImage::new(10, 10).save(dir.path().join("Fiat__Uno/a.png")).unwrap();
        let err = ReferenceIndex::build(dir.path(), &HashEmbedder::new(8), DEFAULT_CELL, false).unwrap_err();
        assert!(err.to_string().contains("no content pixels"), "{err}");
    }

    #[test]
    fn preprocessing_crops_to_content() {
        let img = DynamicImage::ImageRgba8(masked_fixture(50, 50, (10, 20, 10, 5), [10, 10, 10]));
        let out = preprocess_reference(&img, (20, 20), true).unwrap();
        assert_eq!(out.dimensions(), (20, 20));
        // 10x5 content letterboxed to 20x10, centred vertically.
        assert_eq!(out.get_pixel(10, 10).0, [0, 0, 0]);
        assert_eq!(out.get_pixel(10, 2).0, [255, 255, 255]);
        assert!(out.pixels().all(|p| p.0[0] == p.0[1] && p.0[1] == p.0[2]));
    }

    #[test]
    fn gate_and_fallbacks() {
        let dir = tempfile::tempdir().unwrap();
        refset(dir.path());
        let opts = options();
        let templates = TemplateSet::builtin();
        let constant = ConstantEmbedder::new(16);
        let index = ReferenceIndex::build(dir.path(), &constant, (32, 32), false).unwrap();
        let query = RgbImage::from_pixel(30, 20, Rgb([50, 60, 70]));
        let initial = CarOption::new("Renault", "Sandero");

        let stub = ScriptedProvider::from_pairs([("previous answer", "Ford Fiesta")]);
        let r = reflector(&index, &constant, &templates, &opts, 0.8, ReflectionMode::Gated);
        let out = r.reflect(&query, &initial, &stub).unwrap();
        assert_eq!((out.vlm_calls, out.second_query_issued, stub.calls()), (1, false, 0));
        assert_eq!(out.final_answer, initial);

        let r = reflector(&index, &constant, &templates, &opts, 1.5, ReflectionMode::Gated);
        let out = r.reflect(&query, &initial, &stub).unwrap();
        assert_eq!((out.vlm_calls, out.final_answer.clone()), (2, CarOption::new("Ford", "Fiesta")));
        let sent = &stub.requests()[0];
        assert_eq!(sent.images.len(), 1);
        assert!(sent.prompt_text.contains("Renault Sandero") && sent.prompt_text.contains("1.00"));

        let wild =
            ScriptedProvider::from_pairs([("previous answer", "{\"make\":\"Lamborghini\",\"model\":\"Huracan\"}")]);
        let r = reflector(&index, &constant, &templates, &opts, 0.0, ReflectionMode::Always);
        let out = r.reflect(&query, &initial, &wild).unwrap();
        assert_eq!(out.revised, Some(CarOption::new("Lamborghini", "Huracan")));
        assert_eq!(out.final_answer, initial);

        let out = r.reflect(&query, &CarOption::new("Tesla", "X"), &wild).unwrap();
        assert!(out.degraded && !out.second_query_issued);
    }
}
