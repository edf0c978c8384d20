//! Correctness rules, results files and accuracy tables.

mod grid;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompts::CarOption;
use crate::quality::Metric;
use crate::reflection::ReflectionOutcome;
use crate::vlm::{normalize_plate, Candidate, ChatResponse, Strategy};

pub use grid::{quality_extremes_grid, ExtremesGrid, GRID_CELL};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path} line {line}: {reason}")]
    Record { path: String, line: usize, reason: String },
    #[error("empty results: {0}")]
    Empty(String),
    #[error("record {sample_id}: {reason}")]
    Inconsistent { sample_id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTask {
    Plate,
    Make,
    MakeModel,
}

impl EvalTask {
    pub fn label(self) -> &'static str {
        match self {
            EvalTask::Plate => "plate",
            EvalTask::Make => "make",
            EvalTask::MakeModel => "make_model",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    MakeOnly,
    MakeAndModel,
}

/// True iff some candidate normalizes to `gt`.
pub fn plate_correct<S: AsRef<str>>(candidates: &[S], gt: &str) -> bool {
    if candidates.is_empty() {
        log::info!("no plate candidates for {gt}; counted incorrect");
        return false;
    }
    candidates.iter().any(|c| normalize_plate(c.as_ref()) == gt)
}

pub fn mmr_correct(candidates: &[CarOption], gt: &CarOption, mode: MatchMode) -> bool {
    let (gmake, gmodel) = gt.key();
    candidates.iter().any(|c| {
        let (make, model) = c.key();
        make == gmake && (mode == MatchMode::MakeOnly || model == gmodel)
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn from_responses<'a>(responses: impl IntoIterator<Item = &'a ChatResponse>) -> Self {
        responses.into_iter().fold(Self::default(), |acc, r| Self {
            prompt_tokens: acc.prompt_tokens + r.prompt_tokens.unwrap_or(0),
            completion_tokens: acc.completion_tokens + r.completion_tokens.unwrap_or(0),
        })
    }
}

/// One line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    pub task: EvalTask,
    pub strategy: Strategy,
    pub candidates: Vec<Candidate>,
    pub ground_truth: Candidate,
    pub correct: bool,
    pub vlm_calls: u32,
    #[serde(default)]
    pub usage: Usage,
    #[serde(default)]
    pub timing_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<Metric>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflection: Option<ReflectionOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub raw_responses: Vec<String>,
    /// Images that went into the composite, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<String>,
}

/// Applies the task's correctness rule.
pub fn score_candidates(task: EvalTask, candidates: &[Candidate], gt: &Candidate) -> Result<bool, String> {
    match (task, gt) {
        (EvalTask::Plate, Candidate::Plate(g)) => {
            let plates: Vec<&str> = candidates.iter().filter_map(Candidate::as_plate).collect();
            Ok(plate_correct(&plates, g))
        }
        (EvalTask::Make | EvalTask::MakeModel, Candidate::Vehicle(g)) => {
            let cars: Vec<CarOption> = candidates.iter().filter_map(|c| c.as_vehicle().cloned()).collect();
            let mode = if task == EvalTask::Make { MatchMode::MakeOnly } else { MatchMode::MakeAndModel };
            Ok(mmr_correct(&cars, g, mode))
        }
        (t, g) => Err(format!("ground truth {g:?} does not fit task {}", t.label())),
    }
}

impl EvalRecord {
    /// A record whose `correct` flag is computed from `candidates`.
    pub fn scored(
        sample_id: &str,
        task: EvalTask,
        strategy: Strategy,
        candidates: Vec<Candidate>,
        ground_truth: Candidate,
    ) -> Result<Self, EvalError> {
        let correct = score_candidates(task, &candidates, &ground_truth)
            .map_err(|reason| EvalError::Inconsistent { sample_id: sample_id.to_string(), reason })?;
        Ok(Self {
            sample_id: sample_id.to_string(),
            task,
            strategy,
            candidates,
            ground_truth,
            correct,
            vlm_calls: 0,
            usage: Usage::default(),
            timing_ms: 0,
            metric: None,
            model: None,
            reflection: None,
            error: None,
            raw_responses: Vec::new(),
            provenance: Vec::new(),
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

/// Reads a JSONL results file and re-checks every `correct` flag.
pub fn load_results(path: &Path) -> Result<Vec<EvalRecord>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.display().to_string(), source })?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let fail = |reason: String| EvalError::Record { path: path.display().to_string(), line: n + 1, reason };
        let r: EvalRecord = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        let expected = score_candidates(r.task, &r.candidates, &r.ground_truth).map_err(fail)?;
        if expected != r.correct {
            return Err(fail(format!("correct = {} but the candidates score {expected}", r.correct)));
        }
        out.push(r);
    }
    if out.is_empty() {
        return Err(EvalError::Empty(path.display().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    Task,
    Metric,
    Model,
    Strategy,
    Reflection,
}

impl GroupKey {
    pub fn header(self) -> &'static str {
        match self {
            GroupKey::Task => "Task",
            GroupKey::Metric => "Metric",
            GroupKey::Model => "Model",
            GroupKey::Strategy => "Strategy",
            GroupKey::Reflection => "Reflection",
        }
    }

    fn label(self, r: &EvalRecord) -> String {
        match self {
            GroupKey::Task => r.task.label().to_string(),
            GroupKey::Metric => r.metric.map_or("-", Metric::label).to_string(),
            GroupKey::Model => r.model.clone().unwrap_or_else(|| "-".into()),
            GroupKey::Strategy => r.strategy.label().to_string(),
            GroupKey::Reflection => if r.reflection.is_some() { "with" } else { "without" }.to_string(),
        }
    }
}

impl FromStr for GroupKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "task" => Ok(GroupKey::Task),
            "metric" => Ok(GroupKey::Metric),
            "model" => Ok(GroupKey::Model),
            "strategy" => Ok(GroupKey::Strategy),
            "reflection" => Ok(GroupKey::Reflection),
            other => Err(format!("unknown group key {other:?}")),
        }
    }
}

/// `100 * correct / total` in hundredths of a percent, rounded half-up.
pub fn basis_points(correct: u64, total: u64) -> u64 {
    assert!(total > 0, "total must be positive");
    (20_000 * correct + total) / (2 * total)
}

pub fn format_percent(bp: u64) -> String {
    format!("{}.{:02}%", bp / 100, bp % 100)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub labels: Vec<String>,
    pub correct: u64,
    pub total: u64,
    pub basis_points: u64,
}

impl AccuracyRow {
    pub fn percent(&self) -> f64 {
        self.basis_points as f64 / 100.0
    }

    /// `83.05% (49/59)`.
    pub fn cell(&self) -> String {
        format!("{} ({}/{})", format_percent(self.basis_points), self.correct, self.total)
    }
}

impl fmt::Display for AccuracyRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.cell())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub group_by: Vec<GroupKey>,
    pub rows: Vec<AccuracyRow>,
}

/// Folds records into one row per distinct label tuple, sorted by labels.
/// The task is always part of the grouping so tasks never mix.
pub fn accuracy(records: &[EvalRecord], group_by: &[GroupKey]) -> Result<AccuracyReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty("no records".into()));
    }
    let mut keys = group_by.to_vec();
    if !keys.contains(&GroupKey::Task) {
        keys.insert(0, GroupKey::Task);
    }
    let mut groups: BTreeMap<Vec<String>, (u64, u64)> = BTreeMap::new();
    for r in records {
        let e = groups.entry(keys.iter().map(|k| k.label(r)).collect()).or_default();
        e.0 += u64::from(r.correct);
        e.1 += 1;
    }
    let rows = groups
        .into_iter()
        .map(|(labels, (correct, total))| AccuracyRow {
            labels,
            correct,
            total,
            basis_points: basis_points(correct, total),
        })
        .collect();
    Ok(AccuracyReport { group_by: keys, rows })
}

fn render_table(headers: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &[String]| {
        let s: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        s.join("  ").trim_end().to_string()
    };
    let mut out = line(headers);
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

impl AccuracyReport {
    pub fn headers(&self) -> Vec<String> {
        self.group_by.iter().map(|k| k.header().to_string()).chain(["Accuracy".to_string()]).collect()
    }

    pub fn to_text(&self) -> String {
        let rows: Vec<Vec<String>> =
            self.rows.iter().map(|r| r.labels.iter().cloned().chain([r.cell()]).collect()).collect();
        render_table(&self.headers(), &rows)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn row(&self, labels: &[&str]) -> Option<&AccuracyRow> {
        self.rows.iter().find(|r| r.labels.iter().map(String::as_str).eq(labels.iter().copied()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub labels: Vec<String>,
    pub baseline: AccuracyRow,
    pub candidate: AccuracyRow,
    /// Signed difference in hundredths of a percentage point.
    pub delta_bp: i64,
    /// Samples correct only in the candidate run, and only in the baseline.
    pub gained: u64,
    pub lost: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Comparison {
    pub group_by: Vec<GroupKey>,
    pub rows: Vec<DeltaRow>,
}

fn format_delta(bp: i64) -> String {
    let sign = if bp < 0 { "-" } else { "+" };
    format!("{sign}{}.{:02}", bp.unsigned_abs() / 100, bp.unsigned_abs() % 100)
}

/// Pairs two result sets group by group and sample by sample. Rows present
/// in only one side are dropped.
pub fn compare(
    baseline: &[EvalRecord],
    candidate: &[EvalRecord],
    group_by: &[GroupKey],
) -> Result<Comparison, EvalError> {
    let keys: Vec<GroupKey> = group_by.iter().copied().filter(|k| *k != GroupKey::Reflection).collect();
    let a = accuracy(baseline, &keys)?;
    let b = accuracy(candidate, &keys)?;
    let label_of = |r: &EvalRecord| -> Vec<String> { a.group_by.iter().map(|k| k.label(r)).collect() };
    let base_flags: HashMap<(Vec<String>, &str), bool> =
        baseline.iter().map(|r| ((label_of(r), r.sample_id.as_str()), r.correct)).collect();
    let mut flips: HashMap<Vec<String>, (u64, u64)> = HashMap::new();
    for r in candidate {
        let labels = label_of(r);
        if let Some(&before) = base_flags.get(&(labels.clone(), r.sample_id.as_str())) {
            let e = flips.entry(labels).or_default();
            e.0 += u64::from(r.correct && !before);
            e.1 += u64::from(!r.correct && before);
        }
    }
    let rows = a
        .rows
        .iter()
        .filter_map(|ra| {
            let rb = b.rows.iter().find(|rb| rb.labels == ra.labels)?;
            let (gained, lost) = flips.get(&ra.labels).copied().unwrap_or_default();
            Some(DeltaRow {
                labels: ra.labels.clone(),
                baseline: ra.clone(),
                candidate: rb.clone(),
                delta_bp: rb.basis_points as i64 - ra.basis_points as i64,
                gained,
                lost,
            })
        })
        .collect();
    Ok(Comparison { group_by: a.group_by, rows })
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let headers: Vec<String> = self
            .group_by
            .iter()
            .map(|k| k.header().to_string())
            .chain(["Baseline", "Candidate", "Delta", "Gained", "Lost"].map(String::from))
            .collect();
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                r.labels
                    .iter()
                    .cloned()
                    .chain([
                        r.baseline.cell(),
                        r.candidate.cell(),
                        format_delta(r.delta_bp),
                        r.gained.to_string(),
                        r.lost.to_string(),
                    ])
                    .collect()
            })
            .collect();
        render_table(&headers, &rows)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }
}
