use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use platelens_core::config::{DetectorKind, EmbeddingKind, ProviderMode};
use platelens_core::eval::GroupKey;
use platelens_core::pipeline::{self, PipelineError};
use platelens_core::reflection::ReflectionMode;
use platelens_core::{Metric, PipelineConfig, Strategy};

#[derive(Parser)]
#[command(
    name = "platelens",
    version,
    about = "Plate and make/model recognition from video frames with a vision-language model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank frames by quality and write the ranking plus lowest/highest grids.
    ScoreFrames {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Read plates from the best frames of each sample.
    RecognizePlate {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Identify vehicle make and model, optionally with reflection.
    RecognizeMmr {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[command(flatten)]
        opts: Overrides,
    },
    /// Print accuracy tables; a second file is compared against the first.
    Evaluate {
        #[arg(required = true, num_args = 1..=2)]
        results: Vec<PathBuf>,
        /// Extra grouping columns: metric, model, strategy, reflection.
        #[arg(long, value_delimiter = ',')]
        group_by: Vec<GroupKey>,
        /// Print JSON instead of a text table.
        #[arg(long)]
        json: bool,
    },
    /// Embed one reference image per class directory into an index.
    BuildRefset {
        root: PathBuf,
        #[command(flatten)]
        opts: Overrides,
    },
}

/// Flags layered over the config file.
#[derive(Args)]
struct Overrides {
    /// JSON config file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    provider_mode: Option<ProviderMode>,
    #[arg(long)]
    cassette: Option<PathBuf>,
    #[arg(long)]
    stub_script: Option<PathBuf>,
    #[arg(long)]
    model_id: Option<String>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    embedding: Option<EmbeddingKind>,
    #[arg(long)]
    embedding_url: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    reflection: Option<ReflectionMode>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    options: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    svr_model: Option<PathBuf>,
    #[arg(long)]
    detector: Option<DetectorKind>,
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    ocr_hint: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
    ($dst:expr, some $src:expr) => {
        if let Some(v) = $src {
            $dst = Some(v);
        }
    };
}

impl Overrides {
    fn into_config(self) -> Result<PipelineConfig, PipelineError> {
        let mut c = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        set!(c.metric, self.metric);
        set!(c.k, self.k);
        set!(c.strategy, self.strategy);
        set!(c.provider.mode, self.provider_mode);
        set!(c.provider.cassette, some self.cassette);
        set!(c.provider.stub_script, some self.stub_script);
        set!(c.provider.model_id, self.model_id);
        set!(c.provider.base_url, self.base_url);
        set!(c.embedding.backend, self.embedding);
        set!(c.embedding.url, self.embedding_url);
        set!(c.threshold, self.threshold);
        set!(c.reflection, self.reflection);
        set!(c.index, some self.index);
        set!(c.options, some self.options);
        set!(c.template_dir, some self.templates);
        set!(c.svr_model, some self.svr_model);
        set!(c.detector, self.detector);
        set!(c.detections, some self.detections);
        set!(c.ocr_hint, some self.ocr_hint);
        set!(c.workers, self.workers);
        set!(c.output_dir, self.out);
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::ScoreFrames { manifests, opts } => {
            for out in pipeline::cmd_score_frames(&manifests, opts.into_config()?)? {
                println!("{}\t{}", out.sample_id, out.ranking_path.display());
            }
        }
        Command::RecognizePlate { manifests, opts } => {
            let (path, records) = pipeline::cmd_recognize_plate(&manifests, opts.into_config()?)?;
            summarize(&path, &records);
        }
        Command::RecognizeMmr { manifests, opts } => {
            let (path, records) = pipeline::cmd_recognize_mmr(&manifests, opts.into_config()?)?;
            summarize(&path, &records);
        }
        Command::Evaluate { results, group_by, json } => {
            let out = pipeline::cmd_evaluate(&results, &group_by)?;
            if json {
                println!("{}", out.report.to_json());
                if let Some(c) = &out.comparison {
                    println!("{}", c.to_json());
                }
            } else {
                print!("{}", out.to_text());
            }
        }
        Command::BuildRefset { root, opts } => {
            let (path, index) = pipeline::cmd_build_refset(&root, &opts.into_config()?)?;
            println!("{} classes\t{}", index.entries.len(), path.display());
        }
    }
    Ok(())
}

fn summarize(path: &std::path::Path, records: &[platelens_core::eval::EvalRecord]) {
    let correct = records.iter().filter(|r| r.correct).count();
    info!("{correct}/{} records correct", records.len());
    println!("{}", path.display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
