//! Prompt templates with `{name}` placeholders.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vlm::Strategy;

/// Literal substituted when no OCR hint exists.
pub const OCR_NOT_AVAILABLE: &str = "not available";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {id}: {reason}")]
    Template { id: &'static str, reason: String },
    #[error("reading template {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("car options: {0}")]
    Options(String),
    #[error("prompt value out of range: {0}")]
    Value(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateId {
    Plate,
    PlateThreeOptions,
    MmrInitial,
    MmrThreeOptions,
    Reflection,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] = [
        TemplateId::Plate,
        TemplateId::PlateThreeOptions,
        TemplateId::MmrInitial,
        TemplateId::MmrThreeOptions,
        TemplateId::Reflection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateId::Plate => "plate",
            TemplateId::PlateThreeOptions => "plate_three_options",
            TemplateId::MmrInitial => "mmr_initial",
            TemplateId::MmrThreeOptions => "mmr_three_options",
            TemplateId::Reflection => "reflection",
        }
    }

    fn placeholders(self) -> &'static [&'static str] {
        match self {
            TemplateId::Plate | TemplateId::PlateThreeOptions => &["easy_ocr"],
            TemplateId::MmrInitial | TemplateId::MmrThreeOptions => &["car_options"],
            TemplateId::Reflection => &["guess", "score", "threshold", "car_options"],
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            TemplateId::Plate => include_str!("../templates/plate.txt"),
            TemplateId::PlateThreeOptions => include_str!("../templates/plate_three_options.txt"),
            TemplateId::MmrInitial => include_str!("../templates/mmr_initial.txt"),
            TemplateId::MmrThreeOptions => include_str!("../templates/mmr_three_options.txt"),
            TemplateId::Reflection => include_str!("../templates/reflection.txt"),
        }
    }
}

enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub text: String,
}

impl PromptTemplate {
    pub fn new(id: TemplateId, text: &str) -> Result<Self, PromptError> {
        let t = Self { id, text: text.trim_end().to_string() };
        let found: BTreeSet<String> = t
            .pieces()?
            .into_iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s),
                Piece::Text(_) => None,
            })
            .collect();
        let expected: BTreeSet<String> = id.placeholders().iter().map(|s| s.to_string()).collect();
        if found != expected {
            return Err(PromptError::Template {
                id: id.name(),
                reason: format!("placeholders {found:?} do not match {expected:?}"),
            });
        }
        Ok(t)
    }

    fn pieces(&self) -> Result<Vec<Piece>, PromptError> {
        let err = |reason: String| PromptError::Template { id: self.id.name(), reason };
        let mut out = Vec::new();
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find(['{', '}']) {
            if rest.as_bytes()[open] == b'}' {
                return Err(err(format!("unmatched '}}' at {:?}", &rest[open..])));
            }
            out.push(Piece::Text(rest[..open].to_string()));
            let after = &rest[open + 1..];
            let close = after.find('}').ok_or_else(|| err("unterminated placeholder".into()))?;
            let name = &after[..close];
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(err(format!("bad placeholder name {name:?}")));
            }
            out.push(Piece::Slot(name.to_string()));
            rest = &after[close + 1..];
        }
        out.push(Piece::Text(rest.to_string()));
        Ok(out)
    }

    /// Substitutes every placeholder. Braces inside values are dropped so the
    /// output never carries an unresolved-looking token.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.text.len() + 64);
        for piece in self.pieces()? {
            match piece {
                Piece::Text(t) => out.push_str(&t),
                Piece::Slot(name) => {
                    let (_, v) = values.iter().find(|(k, _)| *k == name).ok_or_else(|| PromptError::Template {
                        id: self.id.name(),
                        reason: format!("no value for {{{name}}}"),
                    })?;
                    out.extend(v.chars().filter(|c| *c != '{' && *c != '}'));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: Vec<PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    pub fn builtin() -> Self {
        let templates = TemplateId::ALL
            .iter()
            .map(|id| PromptTemplate::new(*id, id.builtin()).expect("builtin templates are valid"))
            .collect();
        Self { templates }
    }

    /// Reads `<dir>/<template_id>.txt` for each template; files that are
    /// absent keep the built-in text.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for t in &mut set.templates {
            let path = dir.join(format!("{}.txt", t.id.name()));
            if !path.exists() {
                continue;
            }
            let text = fs::read_to_string(&path)
                .map_err(|source| PromptError::Io { path: path.display().to_string(), source })?;
            *t = PromptTemplate::new(t.id, &text)?;
        }
        Ok(set)
    }

    pub fn get(&self, id: TemplateId) -> &PromptTemplate {
        self.templates.iter().find(|t| t.id == id).expect("every id is present")
    }

    pub fn render_plate_prompt(&self, ocr_hint: Option<&str>, strategy: Strategy) -> Result<String, PromptError> {
        let hint = match ocr_hint.map(str::trim) {
            Some(h) if !h.is_empty() => h,
            _ => OCR_NOT_AVAILABLE,
        };
        let id = match strategy {
            Strategy::ThreeOptions => TemplateId::PlateThreeOptions,
            Strategy::SingleCall | Strategy::ThreeCalls => TemplateId::Plate,
        };
        self.get(id).render(&[("easy_ocr", hint)])
    }

    pub fn render_mmr_prompt(&self, options: &CarOptions, strategy: Strategy) -> Result<String, PromptError> {
        let id = match strategy {
            Strategy::ThreeOptions => TemplateId::MmrThreeOptions,
            Strategy::SingleCall | Strategy::ThreeCalls => TemplateId::MmrInitial,
        };
        self.get(id).render(&[("car_options", &options.render())])
    }

    pub fn render_reflection_prompt(
        &self,
        guess: &CarOption,
        score: f64,
        threshold: f64,
        options: &CarOptions,
    ) -> Result<String, PromptError> {
        for (name, v) in [("score", score), ("threshold", threshold)] {
            if !v.is_finite() || v < 0.0 {
                return Err(PromptError::Value(format!("{name} = {v}")));
            }
            if v > 1.0 {
                log::warn!("reflection prompt {name} {v} lies above 1");
            }
        }
        if !options.contains(guess) {
            log::warn!("reflection guess {guess} is not among the car options");
        }
        let guess = guess.to_string();
        self.get(TemplateId::Reflection).render(&[
            ("guess", &guess),
            ("score", &format!("{score:.2}")),
            ("threshold", &format!("{threshold:.2}")),
            ("car_options", &options.render()),
        ])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CarOption {
    pub make: String,
    pub model: String,
}

impl CarOption {
    pub fn new(make: impl Into<String>, model: impl Into<String>) -> Self {
        Self { make: make.into(), model: model.into() }
    }

    /// Case-folded, trimmed key used by every make/model comparison.
    pub fn key(&self) -> (String, String) {
        (self.make.trim().to_lowercase(), self.model.trim().to_lowercase())
    }
}

impl fmt::Display for CarOption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.make, self.model)
    }
}

/// Non-empty, duplicate-free, lexicographically sorted make/model classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CarOptions(Vec<CarOption>);

impl<'de> Deserialize<'de> for CarOptions {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<CarOption>::deserialize(d)?;
        CarOptions::new(v).map_err(serde::de::Error::custom)
    }
}

impl CarOptions {
    pub fn new(options: Vec<CarOption>) -> Result<Self, PromptError> {
        if options.is_empty() {
            return Err(PromptError::Options("no options".into()));
        }
        let mut seen = HashSet::new();
        let mut options: Vec<CarOption> =
            options.into_iter().map(|o| CarOption::new(o.make.trim(), o.model.trim())).collect();
        for o in &options {
            if o.make.is_empty() || o.model.is_empty() {
                return Err(PromptError::Options(format!("empty make or model in {o:?}")));
            }
            if o.make.contains(',') || o.model.contains(',') {
                return Err(PromptError::Options(format!("comma inside option {o}")));
            }
            if !seen.insert(o.key()) {
                return Err(PromptError::Options(format!("duplicate option {o}")));
            }
        }
        options.sort();
        Ok(Self(options))
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text =
            fs::read_to_string(path).map_err(|source| PromptError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|e| PromptError::Options(format!("{}: {e}", path.display())))
    }

    pub fn as_slice(&self) -> &[CarOption] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, o: &CarOption) -> bool {
        self.find(o).is_some()
    }

    /// Canonical entry matching `o` case-insensitively after trimming.
    pub fn find(&self, o: &CarOption) -> Option<&CarOption> {
        let key = o.key();
        self.0.iter().find(|c| c.key() == key)
    }

    /// Matches a bare "Make Model" string against the option display names.
    pub fn find_display(&self, text: &str) -> Option<&CarOption> {
        let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let wanted = norm(text);
        self.0.iter().find(|c| norm(&c.to_string()) == wanted)
    }

    /// `"Make Model, Make Model, ..."` in sorted order.
    pub fn render(&self) -> String {
        self.0.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
    }
}
