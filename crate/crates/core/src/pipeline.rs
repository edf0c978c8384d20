//! End-to-end commands: frame scoring, plate and make/model recognition,
//! evaluation and reference-set building.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use image::imageops::FilterType;
use image::RgbImage;
use serde::Serialize;
use thiserror::Error;

use crate::compositing::{compose_rows, encode_png, CompositeError, CompositeSpec, LabeledImage};
use crate::config::{ConfigError, DetectorKind, PipelineConfig, ProviderMode};
use crate::embedding::{Embedding, EmbeddingBackend, EmbeddingError};
use crate::eval::{
    accuracy, compare, load_results, quality_extremes_grid, AccuracyReport, Comparison, EvalError, EvalRecord,
    EvalTask, GroupKey, Usage,
};
use crate::ingestion::{
    detect, load_manifest, AnnotationDetector, CropSet, Detection, DetectionKind, Detector, ExternalDetections,
    FullFrameDetector, IngestError, SampleManifest,
};
use crate::prompts::{CarOption, CarOptions, PromptError, TemplateSet};
use crate::quality::brisque::MIN_FEATURE_EDGE;
use crate::quality::{
    brisque_features, brisque_score, clip_iqa, FrameRanking, LumaPlane, Metric, QualityError, QualityScore, SvrModel,
    NEGATIVE_PROMPT, POSITIVE_PROMPT,
};
use crate::reflection::{ReferenceIndex, ReflectionError, ReflectionMode, ReflectionOutcome, Reflector};
use crate::vlm::{
    run_strategy, Candidate, Cassette, ChatRequest, ChatResponse, HttpProvider, RecordingProvider, ReplayProvider,
    ScriptedProvider, TaskKind, VlmError, VlmProvider,
};

pub const PLATE_RESULTS: &str = "plate_results.jsonl";
pub const MMR_RESULTS: &str = "mmr_results.jsonl";
pub const INDEX_FILE: &str = "reference_index.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Quality(#[from] QualityError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Composite(#[from] CompositeError),
    #[error(transparent)]
    Reflection(#[from] ReflectionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Vlm(#[from] VlmError),
    #[error("writing {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("sample {sample_id}: {source}")]
    Sample { sample_id: String, source: Box<PipelineError> },
}

impl PipelineError {
    /// 1 for provider or extraction failures, 2 for input and configuration errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Sample { source, .. } => source.exit_code(),
            PipelineError::Vlm(e) | PipelineError::Reflection(ReflectionError::Vlm(e)) => match e {
                VlmError::Config(_) | VlmError::Cassette { .. } => 2,
                _ => 1,
            },
            PipelineError::Embedding(EmbeddingError::Backend(_))
            | PipelineError::Reflection(ReflectionError::Embedding(EmbeddingError::Backend(_))) => 1,
            _ => 2,
        }
    }

    fn in_sample(self, sample_id: &str) -> Self {
        match self {
            e @ PipelineError::Sample { .. } => e,
            e => PipelineError::Sample { sample_id: sample_id.to_string(), source: Box::new(e) },
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

/// Builds the provider the config asks for. Record mode wraps the stub
/// script when one is configured, otherwise the live endpoint.
pub fn build_provider(config: &PipelineConfig) -> Result<Box<dyn VlmProvider>, PipelineError> {
    let p = &config.provider;
    let need = |v: &Option<PathBuf>, what: &str| {
        v.clone().ok_or_else(|| PipelineError::Config(ConfigError(format!("{what} is required"))))
    };
    Ok(match p.mode {
        ProviderMode::Live => Box::new(HttpProvider::new(p.http_config())?),
        ProviderMode::Stub => Box::new(ScriptedProvider::load(&need(&p.stub_script, "stub script")?)?),
        ProviderMode::Replay => Box::new(ReplayProvider::open(&need(&p.cassette, "cassette")?)?),
        ProviderMode::Record => {
            let cassette = Cassette::open_writable(&need(&p.cassette, "cassette")?)?;
            match &p.stub_script {
                Some(script) => Box::new(RecordingProvider::new(ScriptedProvider::load(script)?, cassette)),
                None => Box::new(RecordingProvider::new(HttpProvider::new(p.http_config())?, cassette)),
            }
        }
    })
}

/// Shared, read-only state for one command invocation.
pub struct Runtime {
    pub config: PipelineConfig,
    pub provider: Box<dyn VlmProvider>,
    pub backend: Box<dyn EmbeddingBackend>,
    pub templates: TemplateSet,
    pub svr: Option<SvrModel>,
}

impl Runtime {
    pub fn from_config(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let provider = build_provider(&config)?;
        let backend = config.embedding.build();
        Self::with_parts(config, provider, backend)
    }

    /// Uses the given provider and backend instead of the configured ones.
    pub fn with_parts(
        config: PipelineConfig,
        provider: Box<dyn VlmProvider>,
        backend: Box<dyn EmbeddingBackend>,
    ) -> Result<Self, PipelineError> {
        config.validate_pipeline()?;
        let templates = match &config.template_dir {
            Some(dir) => TemplateSet::load_dir(dir)?,
            None => TemplateSet::builtin(),
        };
        let svr = config.svr_model.as_deref().map(SvrModel::load).transpose()?;
        Ok(Self { config, provider, backend, templates, svr })
    }

    fn base_request(&self, prompt: String, images: Vec<Vec<u8>>) -> ChatRequest {
        ChatRequest {
            temperature: self.config.provider.temperature,
            max_tokens: self.config.provider.max_tokens,
            ..ChatRequest::new(&self.config.provider.model_id, prompt, images)
        }
    }

    fn out_dir(&self) -> Result<&Path, PipelineError> {
        let dir = self.config.output_dir.as_path();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        Ok(dir)
    }

    fn detector_for(&self, manifest: &SampleManifest) -> Result<Box<dyn Detector>, PipelineError> {
        Ok(match self.config.detector {
            DetectorKind::Annotation => Box::new(AnnotationDetector::new(manifest.detections.clone())),
            DetectorKind::Fullframe => Box::new(FullFrameDetector),
            DetectorKind::External => {
                let path = self.config.detections.as_ref().ok_or_else(|| ConfigError("no detections file".into()))?;
                let path =
                    if path.is_dir() { path.join(format!("{}.jsonl", manifest.sample_id)) } else { path.clone() };
                Box::new(ExternalDetections::load(&path)?)
            }
        })
    }
}

/// Scores images with one metric; CLIP-IQA prompt embeddings are computed once.
pub struct FrameScorer<'a> {
    metric: Metric,
    svr: &'a SvrModel,
    backend: &'a dyn EmbeddingBackend,
    prompts: Option<(Embedding, Embedding)>,
}

impl<'a> FrameScorer<'a> {
    pub fn new(rt: &'a Runtime) -> Result<Self, PipelineError> {
        let prompts = match rt.config.metric {
            Metric::ClipIqa => Some((rt.backend.embed_text(POSITIVE_PROMPT)?, rt.backend.embed_text(NEGATIVE_PROMPT)?)),
            Metric::Brisque => None,
        };
        Ok(Self {
            metric: rt.config.metric,
            svr: rt.svr.as_ref().unwrap_or_else(|| SvrModel::builtin()),
            backend: rt.backend.as_ref(),
            prompts,
        })
    }

    pub fn score(&self, img: &RgbImage) -> Result<QualityScore, PipelineError> {
        match &self.prompts {
            None => {
                let edge = MIN_FEATURE_EDGE as u32;
                let (w, h) = img.dimensions();
                let plane = if w < edge || h < edge {
                    let s = f64::from(edge) / f64::from(w.min(h));
                    let up = image::imageops::resize(
                        img,
                        ((f64::from(w) * s).ceil() as u32).max(edge),
                        ((f64::from(h) * s).ceil() as u32).max(edge),
                        FilterType::CatmullRom,
                    );
                    LumaPlane::from_rgb(&up)?
                } else {
                    LumaPlane::from_rgb(img)?
                };
                Ok(brisque_score(&brisque_features(&plane)?, self.svr))
            }
            Some((pos, neg)) => {
                let e = self.backend.embed_image(&encode_png(img)?)?;
                Ok(clip_iqa(&e, pos, Some(neg))?)
            }
        }
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    /// Ranks `(frame_index, image)` pairs; images that cannot be scored are
    /// skipped with a warning.
    pub fn rank(&self, items: &[(usize, &RgbImage)]) -> Result<FrameRanking, PipelineError> {
        let mut scores = Vec::with_capacity(items.len());
        for (i, img) in items {
            match self.score(img) {
                Ok(s) => scores.push((*i, s)),
                Err(
                    e @ (PipelineError::Quality(QualityError::Degenerate(_))
                    | PipelineError::Quality(QualityError::Contract(_))),
                ) => {
                    log::warn!("frame {i} skipped: {e}")
                }
                Err(e) => return Err(e),
            }
        }
        if scores.is_empty() {
            return Err(QualityError::Degenerate("no frame could be scored".into()).into());
        }
        Ok(FrameRanking::new(&scores)?)
    }
}

/// Runs `work` over `items` on `workers` threads; results keep input order.
fn run_parallel<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    work: impl Fn(&T) -> Result<R, PipelineError> + Sync,
) -> Result<Vec<R>, PipelineError> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R, PipelineError>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let r = work(item);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("result slots").into_iter().map(|r| r.expect("every item processed")).collect()
}

fn write_jsonl(path: &Path, records: &[EvalRecord]) -> Result<(), PipelineError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for r in records {
        writeln!(f, "{}", r.to_json_line()).map_err(io_err(path))?;
    }
    Ok(())
}

fn file_stem(sample_id: &str) -> String {
    sample_id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreFramesOutput {
    pub sample_id: String,
    pub ranking: FrameRanking,
    pub ranking_path: PathBuf,
    pub lowest_grid: PathBuf,
    pub highest_grid: PathBuf,
}

/// Scores every full frame, writes `<id>.ranking.json` plus lowest/highest grids.
pub fn score_frames(rt: &Runtime, manifest_path: &Path) -> Result<ScoreFramesOutput, PipelineError> {
    let manifest = load_manifest(manifest_path)?;
    let id = manifest.sample_id.clone();
    let inner = || -> Result<ScoreFramesOutput, PipelineError> {
        let frames = manifest.load_frames()?;
        let scorer = FrameScorer::new(rt)?;
        let items: Vec<(usize, &RgbImage)> = frames.iter().enumerate().collect();
        let ranking = scorer.rank(&items)?;
        let grids = quality_extremes_grid(&ranking, &frames, rt.config.grid_n)?;
        let dir = rt.out_dir()?;
        let stem = file_stem(&id);
        let ranking_path = dir.join(format!("{stem}.ranking.json"));
        let json = serde_json::to_string_pretty(&ranking).expect("ranking serializes") + "\n";
        fs::write(&ranking_path, json).map_err(io_err(&ranking_path))?;
        let lowest_grid = dir.join(format!("{stem}.lowest.png"));
        let highest_grid = dir.join(format!("{stem}.highest.png"));
        grids.lowest.write_png(&lowest_grid)?;
        grids.highest.write_png(&highest_grid)?;
        Ok(ScoreFramesOutput { sample_id: id.clone(), ranking, ranking_path, lowest_grid, highest_grid })
    };
    inner().map_err(|e| e.in_sample(&id))
}

/// Best plate crop per frame: highest confidence, first on ties.
fn best_plate_per_frame(detections: &[Detection]) -> Vec<Detection> {
    let mut out: Vec<Detection> = Vec::new();
    for d in detections.iter().filter(|d| d.kind == DetectionKind::Plate) {
        match out.last_mut() {
            Some(last) if last.frame_index == d.frame_index => {
                if d.confidence > last.confidence {
                    *last = d.clone();
                }
            }
            _ => out.push(d.clone()),
        }
    }
    out
}

/// Candidates, raw responses and the extraction error, if any.
type Outcome = (Vec<Candidate>, Vec<ChatResponse>, Option<String>);

fn strategy_outcome(rt: &Runtime, request: &ChatRequest, task: TaskKind<'_>) -> Result<Outcome, PipelineError> {
    match run_strategy(rt.config.strategy, request, rt.provider.as_ref(), task) {
        Ok(p) => Ok((p.candidates, p.raw_responses, None)),
        Err(e @ VlmError::EmptyCandidates { .. }) => {
            let msg = e.to_string();
            let VlmError::EmptyCandidates { raw_responses } = e else { unreachable!() };
            Ok((Vec::new(), raw_responses, Some(msg)))
        }
        Err(e) => Err(e.into()),
    }
}

fn timing(responses: &[ChatResponse]) -> u64 {
    responses.iter().map(|r| r.latency_ms).sum()
}

/// Detect, crop plates, rank, stack the top `k`, query and score one sample.
pub fn recognize_plate_sample(rt: &Runtime, manifest: &SampleManifest) -> Result<EvalRecord, PipelineError> {
    let gt = manifest
        .gt_plate
        .clone()
        .ok_or_else(|| ConfigError(format!("manifest for {} has no ground-truth plate", manifest.sample_id)))?;
    let frames = manifest.load_frames()?;
    let detections = best_plate_per_frame(&detect(rt.detector_for(manifest)?.as_ref(), &frames)?);
    if detections.is_empty() {
        return Err(IngestError::Detector { frame_index: 0, reason: "no plate detections".into() }.into());
    }
    let crops = CropSet::build(&manifest.sample_id, &frames, &detections)?;
    let items: Vec<(usize, &RgbImage)> = crops.crops.iter().map(|c| (c.frame_index, &c.image)).collect();
    let scorer = FrameScorer::new(rt)?;
    let ranking = scorer.rank(&items)?.best(rt.config.k);
    let chosen: Vec<LabeledImage> = ranking
        .entries
        .iter()
        .map(|e| {
            let c = crops.crops.iter().find(|c| c.frame_index == e.frame_index).expect("ranked crop exists");
            LabeledImage::new(format!("frame {}", e.frame_index), c.image.clone())
        })
        .collect();
    let composite = compose_rows(&chosen, &CompositeSpec::row_stack())?;
    let hint = rt.config.ocr_hint.as_deref().or(manifest.ocr_hint.as_deref());
    let prompt = rt.templates.render_plate_prompt(hint, rt.config.strategy)?;
    let request = rt.base_request(prompt, vec![composite.to_png()?]);
    let (candidates, responses, error) = strategy_outcome(rt, &request, TaskKind::Plate)?;
    let mut rec =
        EvalRecord::scored(&manifest.sample_id, EvalTask::Plate, rt.config.strategy, candidates, Candidate::Plate(gt))?;
    rec.vlm_calls = responses.len() as u32;
    rec.usage = Usage::from_responses(&responses);
    rec.timing_ms = timing(&responses);
    rec.metric = Some(scorer.metric());
    rec.model = Some(rt.config.provider.model_id.clone());
    rec.provenance = composite.provenance;
    if error.is_some() {
        rec.raw_responses = responses.into_iter().map(|r| r.raw_text).collect();
        rec.error = error;
    }
    Ok(rec)
}

fn load_manifests(paths: &[PathBuf]) -> Result<Vec<SampleManifest>, PipelineError> {
    if paths.is_empty() {
        return Err(ConfigError("no manifests given".into()).into());
    }
    paths.iter().map(|p| load_manifest(p).map_err(Into::into)).collect()
}

/// Runs the plate pipeline over every manifest and writes `plate_results.jsonl`.
pub fn recognize_plate(rt: &Runtime, manifests: &[PathBuf]) -> Result<(PathBuf, Vec<EvalRecord>), PipelineError> {
    let samples = load_manifests(manifests)?;
    let records = run_parallel(&samples, rt.config.workers, |m| {
        recognize_plate_sample(rt, m).map_err(|e| e.in_sample(&m.sample_id))
    })?;
    let path = rt.out_dir()?.join(PLATE_RESULTS);
    write_jsonl(&path, &records)?;
    Ok((path, records))
}

/// Highest-confidence vehicle box (lowest frame on ties), else the first frame.
fn vehicle_crop(
    rt: &Runtime,
    manifest: &SampleManifest,
    frames: &[RgbImage],
) -> Result<(String, RgbImage), PipelineError> {
    let detections = detect(rt.detector_for(manifest)?.as_ref(), frames)?;
    let best =
        detections.iter().filter(|d| d.kind == DetectionKind::Vehicle).fold(None::<&Detection>, |acc, d| match acc {
            Some(a) if a.confidence >= d.confidence => Some(a),
            _ => Some(d),
        });
    Ok(match best {
        Some(d) => {
            (format!("frame {} vehicle", d.frame_index), crate::ingestion::crop(&frames[d.frame_index], d.bbox)?)
        }
        None => ("frame 0".to_string(), frames[0].clone()),
    })
}

/// Make/model resources shared by every sample.
pub struct MmrContext {
    pub options: CarOptions,
    pub index: Option<ReferenceIndex>,
}

impl MmrContext {
    pub fn load(rt: &Runtime) -> Result<Self, PipelineError> {
        let index = rt.config.index.as_deref().map(ReferenceIndex::load).transpose()?;
        let options = match (&rt.config.options, &index) {
            (Some(p), _) => CarOptions::load(p)?,
            (None, Some(idx)) => idx.options()?,
            (None, None) => {
                return Err(
                    ConfigError("make/model recognition needs an options file or a reference index".into()).into()
                )
            }
        };
        if let Some(idx) = &index {
            idx.check_options(&options)?;
            match &idx.embedding_model {
                Some(m) if rt.config.reflection != ReflectionMode::Off && m != rt.backend.model_id() => {
                    return Err(EmbeddingError::ModelMismatch {
                        expected: m.clone(),
                        actual: rt.backend.model_id().to_string(),
                    }
                    .into())
                }
                _ => {}
            }
        }
        Ok(Self { options, index })
    }
}

fn dedup_vehicles(candidates: Vec<Candidate>) -> Vec<Candidate> {
    let mut out: Vec<Candidate> = Vec::new();
    for c in candidates {
        let key = c.as_vehicle().map(CarOption::key);
        if !out.iter().any(|o| o.as_vehicle().map(CarOption::key) == key) {
            out.push(c);
        }
    }
    out
}

/// Queries make/model for one sample, optionally reflects, and returns the
/// `make` and `make_model` records.
pub fn recognize_mmr_sample(
    rt: &Runtime,
    ctx: &MmrContext,
    manifest: &SampleManifest,
) -> Result<[EvalRecord; 2], PipelineError> {
    let gt = match (&manifest.gt_make, &manifest.gt_model) {
        (Some(make), Some(model)) => CarOption::new(make, model),
        _ => {
            return Err(
                ConfigError(format!("manifest for {} lacks ground-truth make and model", manifest.sample_id)).into()
            )
        }
    };
    let frames = manifest.load_frames()?;
    let (crop_id, query) = vehicle_crop(rt, manifest, &frames)?;
    let prompt = rt.templates.render_mmr_prompt(&ctx.options, rt.config.strategy)?;
    let request = rt.base_request(prompt, vec![encode_png(&query)?]);
    let task = TaskKind::Mmr { options: Some(&ctx.options) };
    let (mut candidates, mut responses, error) = strategy_outcome(rt, &request, task)?;
    let mut outcome: Option<ReflectionOutcome> = None;
    let index = ctx.index.as_ref().filter(|_| rt.config.reflection != ReflectionMode::Off);
    if let (Some(index), Some(initial)) = (index, candidates.first().and_then(Candidate::as_vehicle).cloned()) {
        let reflector = Reflector {
            index,
            backend: rt.backend.as_ref(),
            templates: &rt.templates,
            options: &ctx.options,
            threshold: rt.config.threshold,
            mode: rt.config.reflection,
            request: rt.base_request(String::new(), Vec::new()),
        };
        let out = reflector.reflect(&query, &initial, rt.provider.as_ref())?;
        candidates[0] = Candidate::Vehicle(out.final_answer.clone());
        candidates = dedup_vehicles(candidates);
        responses.extend(out.response.clone());
        outcome = Some(out);
    }
    let build = |task: EvalTask| -> Result<EvalRecord, PipelineError> {
        let mut rec = EvalRecord::scored(
            &manifest.sample_id,
            task,
            rt.config.strategy,
            candidates.clone(),
            Candidate::Vehicle(gt.clone()),
        )?;
        rec.vlm_calls = responses.len() as u32;
        rec.usage = Usage::from_responses(&responses);
        rec.timing_ms = timing(&responses);
        rec.model = Some(rt.config.provider.model_id.clone());
        rec.reflection = outcome.clone();
        rec.provenance = vec![crop_id.clone()];
        if error.is_some() {
            rec.raw_responses = responses.iter().map(|r| r.raw_text.clone()).collect();
            rec.error = error.clone();
        }
        Ok(rec)
    };
    Ok([build(EvalTask::Make)?, build(EvalTask::MakeModel)?])
}

/// Runs make/model recognition over every manifest and writes `mmr_results.jsonl`.
pub fn recognize_mmr(rt: &Runtime, manifests: &[PathBuf]) -> Result<(PathBuf, Vec<EvalRecord>), PipelineError> {
    let samples = load_manifests(manifests)?;
    let ctx = MmrContext::load(rt)?;
    let pairs = run_parallel(&samples, rt.config.workers, |m| {
        recognize_mmr_sample(rt, &ctx, m).map_err(|e| e.in_sample(&m.sample_id))
    })?;
    let records: Vec<EvalRecord> = pairs.into_iter().flatten().collect();
    let path = rt.out_dir()?.join(MMR_RESULTS);
    write_jsonl(&path, &records)?;
    Ok((path, records))
}

#[derive(Debug, Clone)]
pub struct EvaluateOutput {
    pub report: AccuracyReport,
    /// Present when a second results file was given.
    pub comparison: Option<Comparison>,
}

impl EvaluateOutput {
    pub fn to_text(&self) -> String {
        let mut s = self.report.to_text();
        if let Some(c) = &self.comparison {
            s.push('\n');
            s.push_str(&c.to_text());
        }
        s
    }
}

/// Folds results files into a report. With two files the second is compared
/// against the first; all records are pooled for the main table.
pub fn cmd_evaluate(results: &[PathBuf], group_by: &[GroupKey]) -> Result<EvaluateOutput, PipelineError> {
    let sets: Vec<Vec<EvalRecord>> = results.iter().map(|p| load_results(p)).collect::<Result<_, _>>()?;
    if sets.is_empty() {
        return Err(ConfigError("no results files given".into()).into());
    }
    let pooled: Vec<EvalRecord> = sets.iter().flatten().cloned().collect();
    let report = accuracy(&pooled, group_by)?;
    let comparison = match &sets[..] {
        [base, cand] => Some(compare(base, cand, group_by)?),
        _ => None,
    };
    Ok(EvaluateOutput { report, comparison })
}

pub fn cmd_score_frames(
    manifests: &[PathBuf],
    config: PipelineConfig,
) -> Result<Vec<ScoreFramesOutput>, PipelineError> {
    let rt = scoring_runtime(config)?;
    if manifests.is_empty() {
        return Err(ConfigError("no manifests given".into()).into());
    }
    manifests.iter().map(|m| score_frames(&rt, m)).collect()
}

/// Frame scoring never queries the VLM, so no provider is built.
fn scoring_runtime(config: PipelineConfig) -> Result<Runtime, PipelineError> {
    struct NoProvider;
    impl VlmProvider for NoProvider {
        fn complete(&self, _: &ChatRequest) -> Result<ChatResponse, VlmError> {
            Err(VlmError::Config("frame scoring does not query a provider".into()))
        }
    }
    let backend = config.embedding.build();
    Runtime::with_parts(config, Box::new(NoProvider), backend)
}

pub fn cmd_recognize_plate(
    manifests: &[PathBuf],
    config: PipelineConfig,
) -> Result<(PathBuf, Vec<EvalRecord>), PipelineError> {
    recognize_plate(&Runtime::from_config(config)?, manifests)
}

pub fn cmd_recognize_mmr(
    manifests: &[PathBuf],
    config: PipelineConfig,
) -> Result<(PathBuf, Vec<EvalRecord>), PipelineError> {
    recognize_mmr(&Runtime::from_config(config)?, manifests)
}

/// Builds the reference index and writes it to `<output_dir>/reference_index.json`.
pub fn cmd_build_refset(root: &Path, config: &PipelineConfig) -> Result<(PathBuf, ReferenceIndex), PipelineError> {
    let backend = config.embedding.build();
    let index = ReferenceIndex::build(root, backend.as_ref(), config.reference_cell, config.binary_reference)?;
    let dir = config.output_dir.as_path();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(INDEX_FILE);
    index.write(&path)?;
    Ok((path, index))
}
