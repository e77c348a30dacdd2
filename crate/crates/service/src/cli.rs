//! The `air` command-line interface. Every subcommand except `serve` runs
//! offline against local directories.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use air_core::backend::Backends;
use air_core::filter::FilterParams;
use air_core::model::ContextGrammar;
use air_core::pipeline::jobs::{JobContext, JobKind, JobManager, JobStatus};
use air_core::pipeline::PipelineConfig;
use air_core::trainer::{MergeFraction, Optimizer, TrainConfig};

use crate::api::{self, AppState};
use crate::ops::{self, TrainRequest};
use crate::store::Store;

#[derive(Debug, Parser)]
#[command(name = "air", version, about = "Synthetic image-classification dataset pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset from a context grammar.
    Gen(GenArgs),
    /// Replicate an existing dataset through captioning and regeneration.
    Aug(AugArgs),
    /// Remove duplicates and outliers from a dataset in place.
    Filter(FilterArgs),
    /// Train a linear probe on a dataset's kept images.
    Train(TrainArgs),
    /// Evaluate a trained model on a dataset.
    Eval(EvalArgs),
    /// Predict the class of an image or embedding.
    Predict(PredictArgs),
    /// Start the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// JSON file with a full pipeline configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub images_per_prompt: Option<u32>,
    #[arg(long)]
    pub image_size: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub name: Option<String>,
    /// Apply style transfer towards this domain.
    #[arg(long)]
    pub style: Option<String>,
    /// Keep every generated image.
    #[arg(long)]
    pub no_filter: bool,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub retention: Option<f64>,
    /// Append job events (JSON lines) to this file.
    #[arg(long)]
    pub events: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub grammar: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Use simplistic comma-joined prompts instead of the rewriter.
    #[arg(long)]
    pub no_rewriter: bool,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct AugArgs {
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = air_core::filter::DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, default_value_t = air_core::filter::DEFAULT_RETENTION)]
    pub retention: f64,
    /// Fixed lower similarity bound instead of searching for one.
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    /// Filter across all classes at once.
    #[arg(long)]
    pub global: bool,
    /// Print the report without changing the dataset.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adamw,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Output directory for model.json and metrics.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Augmented dataset to merge into the training split.
    #[arg(long)]
    pub merge: Option<PathBuf>,
    /// Fraction of the augmented dataset to merge (0, 0.1, 0.2, 0.5, 1).
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Also run k-fold cross-validation.
    #[arg(long)]
    pub folds: Option<usize>,
    /// JSON file with a full training configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub events: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// model.json or a directory containing it.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Evaluate on every kept image instead of the validation split.
    #[arg(long)]
    pub all: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// PNG image, embedded with the configured embedder.
    #[arg(long, conflicts_with = "embedding", required_unless_present = "embedding")]
    pub image: Option<PathBuf>,
    /// JSON file holding a 512-element array.
    #[arg(long)]
    pub embedding: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "AIR_LISTEN_ADDR", default_value = "127.0.0.1:8080")]
    pub listen: String,
    #[arg(long, env = "AIR_DATA_DIR", default_value = "air-data")]
    pub data_dir: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub workers: usize,
}

type CliResult<T> = Result<T, String>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn pipeline_config(args: &PipelineArgs) -> CliResult<PipelineConfig> {
    let mut c: PipelineConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = args.images_per_prompt {
        c.images_per_prompt = v;
    }
    if let Some(v) = args.image_size {
        c.image_size = v;
    }
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = args.parallelism {
        c.parallelism = v;
    }
    if let Some(v) = &args.name {
        c.name = Some(v.clone());
    }
    if let Some(d) = &args.style {
        c.use_style_transfer = true;
        c.style_domain = Some(d.clone());
    }
    if args.no_filter {
        c.use_filter = false;
    }
    if let Some(v) = args.beta {
        c.filter.beta = v;
    }
    if let Some(v) = args.retention {
        c.filter.retention_target = v;
    }
    Ok(c)
}

fn train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut c: TrainConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.learning_rate {
        c.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = args.epochs {
        c.epochs = v;
    }
    if let Some(v) = args.optimizer {
        c.optimizer = match v {
            OptimizerArg::Sgd => Optimizer::Sgd,
            OptimizerArg::Adamw => Optimizer::Adamw,
        };
    }
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = args.train_fraction {
        c.train_fraction = v;
    }
    Ok(c)
}

/// Runs `work` as a job, streaming its events to `events` as they arrive.
fn run_job(
    kind: JobKind,
    events: Option<&Path>,
    work: Box<dyn FnOnce(&JobContext) -> air_core::Result<Value> + Send>,
) -> CliResult<Value> {
    let manager = JobManager::new(1, None);
    let id = manager.submit(kind, work).map_err(|e| e.to_string())?;
    let mut sink = match events {
        Some(p) => Some(BufWriter::new(
            File::options()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| format!("{}: {e}", p.display()))?,
        )),
        None => None,
    };
    let mut from = 0;
    loop {
        let (batch, done) = manager
            .wait_events(&id, from, Duration::from_millis(500))
            .map_err(|e| e.to_string())?;
        from += batch.len();
        if let Some(w) = sink.as_mut() {
            for e in &batch {
                let line = serde_json::to_string(e).map_err(|e| e.to_string())?;
                writeln!(w, "{line}").map_err(|e| e.to_string())?;
            }
            w.flush().map_err(|e| e.to_string())?;
        }
        if done {
            break;
        }
    }
    let state = manager.status(&id).map_err(|e| e.to_string())?;
    match state.status {
        JobStatus::Succeeded => Ok(state.result.unwrap_or(Value::Null)),
        _ => Err(state.error.unwrap_or_else(|| format!("job {:?}", state.status))),
    }
}

fn backends() -> CliResult<Backends> {
    Backends::from_env().map_err(|e| e.to_string())
}

pub fn run(cli: Cli) -> CliResult<Value> {
    match cli.command {
        Command::Gen(a) => {
            let grammar: ContextGrammar = read_json(&a.grammar)?;
            let mut config = pipeline_config(&a.pipeline)?;
            if a.no_rewriter {
                config.use_rewriter = false;
            }
            let b = backends()?;
            let out = a.out.clone();
            run_job(
                JobKind::AirGen,
                a.pipeline.events.as_deref(),
                Box::new(move |job| ops::generate(&grammar, &config, &b, job, Some(job.cancel_flag()), &out)),
            )
        }
        Command::Aug(a) => {
            let config = pipeline_config(&a.pipeline)?;
            let b = backends()?;
            let (source, out) = (a.source.clone(), a.out.clone());
            run_job(
                JobKind::AirAug,
                a.pipeline.events.as_deref(),
                Box::new(move |job| ops::augment(&source, &config, &b, job, Some(job.cancel_flag()), &out)),
            )
        }
        Command::Filter(a) => {
            let params = FilterParams {
                beta: a.beta,
                retention_target: a.retention,
                alpha: a.alpha,
                per_class: !a.global,
                ..FilterParams::default()
            };
            let report = ops::filter_dir(&a.dataset, &params, !a.dry_run).map_err(|e| e.to_string())?;
            serde_json::to_value(report).map_err(|e| e.to_string())
        }
        Command::Train(a) => {
            let config = train_config(&a)?;
            let merge_fraction = a
                .fraction
                .map(MergeFraction::from_f64)
                .transpose()
                .map_err(|e| e.to_string())?;
            let request = TrainRequest {
                config,
                folds: a.folds,
                merge_fraction,
            };
            let (dataset, merge, out) = (a.dataset.clone(), a.merge.clone(), a.out.clone());
            let kind = if a.folds.is_some() { JobKind::CrossValidate } else { JobKind::Train };
            run_job(
                kind,
                a.events.as_deref(),
                Box::new(move |job| {
                    job.set_train_total(ops::train_epochs(&request));
                    ops::train(&dataset, merge.as_deref(), &request, job, &out)
                }),
            )
        }
        Command::Eval(a) => {
            let model = ops::load_model(&a.model).map_err(|e| e.to_string())?;
            let report = ops::evaluate_dir(&model, &a.dataset, a.all).map_err(|e| e.to_string())?;
            let mut v = serde_json::to_value(&report).map_err(|e| e.to_string())?;
            v["percent"] = serde_json::json!(report.percent_row());
            Ok(v)
        }
        Command::Predict(a) => {
            let model = ops::load_model(&a.model).map_err(|e| e.to_string())?;
            let out = match (&a.image, &a.embedding) {
                (Some(img), _) => {
                    let bytes = std::fs::read(img).map_err(|e| format!("{}: {e}", img.display()))?;
                    ops::predict_image(&model, &backends()?, &bytes)
                }
                (None, Some(p)) => ops::predict_embedding(&model, &read_json::<Vec<f64>>(p)?),
                (None, None) => unreachable!("clap requires one input"),
            }
            .map_err(|e| e.to_string())?;
            serde_json::to_value(out).map_err(|e| e.to_string())
        }
        Command::Serve(a) => {
            let store = Store::open(&a.data_dir).map_err(|e| e.to_string())?;
            let token = std::env::var("AIR_AUTH_TOKEN").ok().filter(|t| !t.is_empty());
            let state = AppState::new(store, backends()?, a.workers, token);
            let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
            rt.block_on(api::serve(state, &a.listen)).map_err(|e| e.to_string())?;
            Ok(Value::Null)
        }
    }
}

/// Entry point; returns the process exit code.
pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(Value::Null) => 0,
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("json value"));
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
