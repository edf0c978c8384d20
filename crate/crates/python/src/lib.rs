//! Python bindings: quality scoring, ranking, scoring rules, JSON extraction
//! and the end-to-end commands.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde_json::Value;

use platelens_core::embedding::Embedding;
use platelens_core::eval::{self, basis_points, format_percent, GroupKey, MatchMode};
use platelens_core::pipeline::{self, PipelineError};
use platelens_core::quality::{self, brisque_score as score_features, QualityScore, SvrModel};
use platelens_core::vlm;
use platelens_core::{CarOption, Metric};

create_exception!(platelens, PlatelensError, PyException, "Pipeline failure; `exit_code` is 1 or 2.");

fn pipeline_err(e: PipelineError) -> PyErr {
    let err = PlatelensError::new_err(e.to_string());
    Python::attach(|py| {
        let _ = err.value(py).setattr("exit_code", e.exit_code());
    });
    err
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyfunction]
fn normalize_plate(text: &str) -> String {
    vlm::normalize_plate(text)
}

/// True when any candidate equals the ground truth after normalization.
#[pyfunction]
fn plate_correct(candidates: Vec<String>, ground_truth: &str) -> bool {
    eval::plate_correct(&candidates, &vlm::normalize_plate(ground_truth))
}

#[pyfunction]
#[pyo3(signature = (candidates, ground_truth, make_only = false))]
fn mmr_correct(candidates: Vec<(String, String)>, ground_truth: (String, String), make_only: bool) -> bool {
    let cars: Vec<CarOption> = candidates.into_iter().map(|(a, b)| CarOption::new(a, b)).collect();
    let mode = if make_only { MatchMode::MakeOnly } else { MatchMode::MakeAndModel };
    eval::mmr_correct(&cars, &CarOption::new(ground_truth.0, ground_truth.1), mode)
}

/// Table cell such as `83.05% (49/59)`.
#[pyfunction]
fn format_accuracy(correct: u64, total: u64) -> PyResult<String> {
    if total == 0 || correct > total {
        return Err(PyValueError::new_err("need 0 <= correct <= total and total > 0"));
    }
    Ok(format!("{} ({correct}/{total})", format_percent(basis_points(correct, total))))
}

/// First JSON object in a model response, every value as a string.
#[pyfunction]
#[pyo3(signature = (raw, required_keys = Vec::new()))]
fn extract_json(raw: &str, required_keys: Vec<String>) -> PyResult<BTreeMap<String, String>> {
    let keys: Vec<&str> = required_keys.iter().map(String::as_str).collect();
    vlm::extract_json(raw, &keys).map_err(value_err)
}

fn luma(path: &str) -> PyResult<quality::LumaPlane> {
    let img = image_open(path)?;
    quality::LumaPlane::from_dynamic(&img).map_err(value_err)
}

fn image_open(path: &str) -> PyResult<image::DynamicImage> {
    image::open(path).map_err(|e| value_err(format!("{path}: {e}")))
}

#[pyfunction]
fn brisque_features(path: &str) -> PyResult<Vec<f64>> {
    Ok(quality::brisque_features(&luma(path)?).map_err(value_err)?.values().to_vec())
}

/// BRISQUE score of an image file; lower is better.
#[pyfunction]
#[pyo3(signature = (path, model_path = None))]
fn brisque_score(path: &str, model_path: Option<PathBuf>) -> PyResult<f64> {
    let features = quality::brisque_features(&luma(path)?).map_err(value_err)?;
    let score = match model_path {
        Some(p) => score_features(&features, &SvrModel::load(&p).map_err(value_err)?),
        None => score_features(&features, SvrModel::builtin()),
    };
    Ok(score.value)
}

/// CLIP-IQA from unit embeddings; antonym form when `negative` is given.
#[pyfunction]
#[pyo3(signature = (image, positive, negative = None))]
fn clip_iqa(image: Vec<f32>, positive: Vec<f32>, negative: Option<Vec<f32>>) -> PyResult<f64> {
    let image = Embedding::new(image).map_err(value_err)?;
    let positive = Embedding::new(positive).map_err(value_err)?;
    let negative = negative.map(Embedding::new).transpose().map_err(value_err)?;
    Ok(quality::clip_iqa(&image, &positive, negative.as_ref()).map_err(value_err)?.value)
}

#[pyclass(name = "FrameRanking", frozen)]
struct PyFrameRanking(quality::FrameRanking);

#[pymethods]
impl PyFrameRanking {
    #[getter]
    fn frame_indices(&self) -> Vec<usize> {
        self.0.frame_indices()
    }

    #[getter]
    fn scores(&self) -> Vec<f64> {
        self.0.entries.iter().map(|e| e.score.value).collect()
    }

    #[getter]
    fn metric(&self) -> Option<&'static str> {
        self.0.entries.first().map(|e| match e.score.metric {
            Metric::Brisque => "brisque",
            Metric::ClipIqa => "clip_iqa",
        })
    }

    fn best(&self, k: usize) -> PyFrameRanking {
        PyFrameRanking(self.0.best(k))
    }

    fn worst(&self, k: usize) -> PyFrameRanking {
        PyFrameRanking(self.0.worst(k))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("ranking serializes")
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("FrameRanking({:?}, {:?})", self.metric().unwrap_or("empty"), self.0.frame_indices())
    }
}

/// Orders frames best-first by `metric` and keeps `k` (all when omitted).
#[pyfunction]
#[pyo3(signature = (scores, metric, k = None))]
fn rank_frames(scores: Vec<f64>, metric: &str, k: Option<usize>) -> PyResult<PyFrameRanking> {
    let metric: Metric = metric.parse().map_err(PyValueError::new_err)?;
    let scored: Vec<(usize, QualityScore)> =
        scores.iter().enumerate().map(|(i, v)| (i, QualityScore::new(metric, *v))).collect();
    let ranking = quality::rank_frames(&scored, k.unwrap_or(scores.len())).map_err(value_err)?;
    Ok(PyFrameRanking(ranking))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Pipeline configuration; construct from JSON and patch with `update`.
#[pyclass(name = "PipelineConfig", from_py_object)]
#[derive(Clone)]
struct PyPipelineConfig(platelens_core::PipelineConfig);

#[pymethods]
impl PyPipelineConfig {
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let mut c = Self(platelens_core::PipelineConfig::default());
        if let Some(j) = json {
            c.update(j)?;
        }
        Ok(c)
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        platelens_core::PipelineConfig::load(&path).map(Self).map_err(value_err)
    }

    /// Deep-merges a JSON object into the current settings.
    fn update(&mut self, json: &str) -> PyResult<()> {
        let patch: Value = serde_json::from_str(json).map_err(value_err)?;
        let mut current = serde_json::to_value(&self.0).map_err(value_err)?;
        merge(&mut current, patch);
        self.0 = serde_json::from_value(current).map_err(value_err)?;
        Ok(())
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.0).expect("config serializes")
    }

    fn validate(&self) -> PyResult<()> {
        self.0.validate().map_err(value_err)
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.0.output_dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, dir: PathBuf) {
        self.0.output_dir = dir;
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k
    }

    #[getter]
    fn threshold(&self) -> f64 {
        self.0.threshold
    }

    fn __repr__(&self) -> String {
        format!("PipelineConfig({})", serde_json::to_string(&self.0).expect("config serializes"))
    }
}

#[pyclass(name = "AccuracyReport", frozen)]
struct PyAccuracyReport(pipeline::EvaluateOutput);

#[pymethods]
impl PyAccuracyReport {
    /// `(labels, correct, total, cell)` per row.
    #[getter]
    fn rows(&self) -> Vec<(Vec<String>, u64, u64, String)> {
        self.0.report.rows.iter().map(|r| (r.labels.clone(), r.correct, r.total, r.cell())).collect()
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    fn to_json(&self) -> String {
        self.0.report.to_json()
    }

    fn comparison_json(&self) -> Option<String> {
        self.0.comparison.as_ref().map(|c| c.to_json())
    }

    fn __str__(&self) -> String {
        self.0.to_text()
    }
}

#[pyfunction]
fn score_frames(py: Python<'_>, manifests: Vec<PathBuf>, config: PyPipelineConfig) -> PyResult<Vec<PathBuf>> {
    let out = py.detach(|| pipeline::cmd_score_frames(&manifests, config.0)).map_err(pipeline_err)?;
    Ok(out.into_iter().map(|o| o.ranking_path).collect())
}

/// Runs plate recognition; returns the results file path.
#[pyfunction]
fn recognize_plate(py: Python<'_>, manifests: Vec<PathBuf>, config: PyPipelineConfig) -> PyResult<PathBuf> {
    py.detach(|| pipeline::cmd_recognize_plate(&manifests, config.0)).map(|(p, _)| p).map_err(pipeline_err)
}

#[pyfunction]
fn recognize_mmr(py: Python<'_>, manifests: Vec<PathBuf>, config: PyPipelineConfig) -> PyResult<PathBuf> {
    py.detach(|| pipeline::cmd_recognize_mmr(&manifests, config.0)).map(|(p, _)| p).map_err(pipeline_err)
}

#[pyfunction]
#[pyo3(signature = (results, group_by = Vec::new()))]
fn evaluate(results: Vec<PathBuf>, group_by: Vec<String>) -> PyResult<PyAccuracyReport> {
    let keys: Vec<GroupKey> =
        group_by.iter().map(|k| k.parse()).collect::<Result<_, _>>().map_err(PyValueError::new_err)?;
    pipeline::cmd_evaluate(&results, &keys).map(PyAccuracyReport).map_err(pipeline_err)
}

/// Builds the reference index; returns its path.
#[pyfunction]
fn build_refset(py: Python<'_>, root: PathBuf, config: PyPipelineConfig) -> PyResult<PathBuf> {
    py.detach(|| pipeline::cmd_build_refset(&root, &config.0)).map(|(p, _)| p).map_err(pipeline_err)
}

#[pymodule]
fn platelens(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PlatelensError", m.py().get_type::<PlatelensError>())?;
    m.add_class::<PyFrameRanking>()?;
    m.add_class::<PyPipelineConfig>()?;
    m.add_class::<PyAccuracyReport>()?;
    m.add_function(wrap_pyfunction!(normalize_plate, m)?)?;
    m.add_function(wrap_pyfunction!(plate_correct, m)?)?;
    m.add_function(wrap_pyfunction!(mmr_correct, m)?)?;
    m.add_function(wrap_pyfunction!(format_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(extract_json, m)?)?;
    m.add_function(wrap_pyfunction!(brisque_features, m)?)?;
    m.add_function(wrap_pyfunction!(brisque_score, m)?)?;
    m.add_function(wrap_pyfunction!(clip_iqa, m)?)?;
    m.add_function(wrap_pyfunction!(rank_frames, m)?)?;
    m.add_function(wrap_pyfunction!(score_frames, m)?)?;
    m.add_function(wrap_pyfunction!(recognize_plate, m)?)?;
    m.add_function(wrap_pyfunction!(recognize_mmr, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(build_refset, m)?)?;
    Ok(())
}
