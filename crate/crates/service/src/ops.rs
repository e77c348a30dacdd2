//! Operations shared by the CLI and the HTTP API, so both produce the same
//! bytes for the same inputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::AtomicBool;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use air_core::backend::{embed_image, Backends};
use air_core::filter::{filter_dataset, FilterParams, FilterReport};
use air_core::manifest::{load_dataset, manifest_path, save_dataset, write_atomic};
use air_core::model::{derive_id, ContextGrammar, DatasetManifest, FilterVerdict, Flow, EMBEDDING_DIM};
use air_core::pipeline::{run_air_aug, run_air_gen, EventSink, PipelineConfig, PipelineOutput, RunContext};
use air_core::split::split_dataset;
use air_core::trainer::{
    cross_validate, dataset_samples, evaluate, predict, train_on_dataset, MergeFraction, MetricsReport, ModelArtifact,
    ProgressSink, TrainConfig,
};
use air_core::{canonical, Error, Result};

pub const FILTER_REPORT_FILE: &str = "filter_report.json";
pub const MODEL_FILE: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub dataset_id: String,
    pub name: String,
    pub revision: u64,
    pub flow: Flow,
    pub classes: Vec<String>,
    pub prompts: usize,
    pub images: usize,
    pub kept: usize,
    /// Image counts per class and verdict.
    pub counts: BTreeMap<String, BTreeMap<FilterVerdict, usize>>,
}

impl DatasetSummary {
    pub fn of(m: &DatasetManifest) -> Self {
        DatasetSummary {
            dataset_id: m.dataset_id.clone(),
            name: m.name.clone(),
            revision: m.revision,
            flow: m.pipeline_config.flow,
            classes: m.classes.clone(),
            prompts: m.prompts.len(),
            images: m.images.len(),
            kept: m.kept_images().count(),
            counts: m.summary(),
        }
    }
}

pub fn dataset_exists(dir: &Path) -> bool {
    manifest_path(dir).exists()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn persist_report(dir: &Path, report: Option<&FilterReport>) -> Result<()> {
    let path = dir.join(FILTER_REPORT_FILE);
    match report {
        Some(r) => write_json(&path, r),
        None => {
            if path.exists() {
                std::fs::remove_file(&path).map_err(|e| Error::Persistence { path, source: e })?;
            }
            Ok(())
        }
    }
}

fn gen_result(out: &PipelineOutput) -> Value {
    json!({
        "dataset_id": out.manifest.dataset_id,
        "summary": DatasetSummary::of(&out.manifest),
        "filter_report": out.filter_report,
    })
}

/// Runs AIR-Gen into `out_dir`, writing `filter_report.json` when filtering.
pub fn generate(
    grammar: &ContextGrammar,
    config: &PipelineConfig,
    backends: &Backends,
    events: &dyn EventSink,
    cancel: Option<&AtomicBool>,
    out_dir: &Path,
) -> Result<Value> {
    let ctx = RunContext { backends, events, cancel };
    let out = run_air_gen(grammar, config, ctx, out_dir)?;
    persist_report(out_dir, out.filter_report.as_ref())?;
    Ok(gen_result(&out))
}

/// Runs AIR-Aug over the dataset in `source_dir`.
pub fn augment(
    source_dir: &Path,
    config: &PipelineConfig,
    backends: &Backends,
    events: &dyn EventSink,
    cancel: Option<&AtomicBool>,
    out_dir: &Path,
) -> Result<Value> {
    let source = load_dataset(source_dir)?;
    let ctx = RunContext { backends, events, cancel };
    let out = run_air_aug(&source, source_dir, config, ctx, out_dir)?;
    persist_report(out_dir, out.filter_report.as_ref())?;
    Ok(gen_result(&out))
}

/// Filters the dataset in `dir`. With `persist`, verdicts are written back
/// (new revision) together with `filter_report.json`; otherwise nothing on
/// disk changes.
pub fn filter_dir(dir: &Path, params: &FilterParams, persist: bool) -> Result<FilterReport> {
    let manifest = load_dataset(dir)?;
    let (filtered, report) = filter_dataset(&manifest, params)?;
    if persist {
        save_dataset(&filtered, dir)?;
        persist_report(dir, Some(&report))?;
    }
    Ok(report)
}

/// Where a model's training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRequest {
    pub config: TrainConfig,
    /// Run k-fold cross-validation in addition to the final fit.
    pub folds: Option<usize>,
    pub merge_fraction: Option<MergeFraction>,
}

/// Deterministic model id for a training request.
pub fn model_id(dataset: &DatasetManifest, augmented: Option<&DatasetManifest>, request: &TrainRequest) -> Result<String> {
    let aug = augmented.map(|a| format!("{}@{}", a.dataset_id, a.revision)).unwrap_or_default();
    let req = canonical::to_line(request)?;
    Ok(derive_id(
        "model",
        &[dataset.dataset_id.as_bytes(), &dataset.revision.to_le_bytes(), aug.as_bytes(), req.as_bytes()],
    ))
}

pub fn train_epochs(request: &TrainRequest) -> usize {
    request.config.epochs * (request.folds.unwrap_or(0) + 1)
}

/// Trains on `dataset_dir` (plus an optional augmented dataset) and writes
/// `model.json` and `metrics.json` into `out_dir`.
pub fn train(
    dataset_dir: &Path,
    augmented_dir: Option<&Path>,
    request: &TrainRequest,
    sink: &dyn ProgressSink,
    out_dir: &Path,
) -> Result<Value> {
    let dataset = load_dataset(dataset_dir)?;
    let augmented = augmented_dir.map(load_dataset).transpose()?;
    let merge = match (&augmented, request.merge_fraction) {
        (Some(a), f) => Some((a, f.unwrap_or(MergeFraction::All))),
        (None, Some(_)) => return Err(Error::validation("merge", "a merge fraction needs an augmented dataset")),
        (None, None) => None,
    };
    let id = model_id(&dataset, augmented.as_ref(), request)?;
    let cv = match request.folds {
        Some(k) => Some(cross_validate(&dataset, k, &request.config, sink)?),
        None => None,
    };
    let outcome = train_on_dataset(&dataset, merge, &request.config, sink)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Persistence { path: out_dir.to_path_buf(), source: e })?;
    outcome.model.save(&out_dir.join(MODEL_FILE))?;
    let mut metrics = serde_json::to_value(&outcome.metrics)?;
    let obj = metrics.as_object_mut().expect("struct");
    obj.insert("model_id".into(), json!(id));
    obj.insert("dataset_id".into(), json!(dataset.dataset_id));
    obj.insert("train_size".into(), json!(outcome.split.train.len() + outcome.augmented_used.len()));
    obj.insert("validation_size".into(), json!(outcome.split.validation.len()));
    obj.insert("augmented_used".into(), json!(outcome.augmented_used.len()));
    obj.insert("percent".into(), json!(outcome.metrics.percent_row()));
    if let Some(cv) = cv {
        obj.insert("folds".into(), serde_json::to_value(&cv.folds)?);
        obj.insert("mean".into(), serde_json::to_value(&cv.mean)?);
    }
    write_json(&out_dir.join(METRICS_FILE), &metrics)?;
    Ok(metrics)
}

pub fn load_model(path: &Path) -> Result<ModelArtifact> {
    if path.is_dir() {
        ModelArtifact::load(&path.join(MODEL_FILE))
    } else {
        ModelArtifact::load(path)
    }
}

/// Evaluates `model` on the validation split it was trained against, or on
/// every kept image with `all`.
pub fn evaluate_dir(model: &ModelArtifact, dataset_dir: &Path, all: bool) -> Result<MetricsReport> {
    let dataset = load_dataset(dataset_dir)?;
    if model.class_names != dataset.classes {
        let missing = dataset
            .classes
            .iter()
            .find(|c| !model.class_names.contains(c))
            .or_else(|| model.class_names.iter().find(|c| !dataset.classes.contains(c)))
            .cloned()
            .unwrap_or_default();
        return Err(Error::LabelMismatch { class: missing });
    }
    let ids: Vec<String> = if all {
        dataset.kept_images().map(|i| i.id.clone()).collect()
    } else {
        split_dataset(&dataset, model.train_config.train_fraction, model.train_config.seed)?.validation
    };
    evaluate(model, &dataset_samples(&dataset, &ids)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionOutput {
    pub label: String,
    pub probabilities: Vec<f64>,
    pub class_names: Vec<String>,
}

pub fn predict_embedding(model: &ModelArtifact, embedding: &[f64]) -> Result<PredictionOutput> {
    if embedding.len() != EMBEDDING_DIM {
        return Err(Error::validation(
            "embedding",
            format!("embedding length must be {EMBEDDING_DIM}, got {}", embedding.len()),
        ));
    }
    if embedding.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("embedding", "values must be finite"));
    }
    let p = predict(model, &[embedding.to_vec()])?.remove(0);
    Ok(PredictionOutput {
        label: model.class_names[p.label].clone(),
        probabilities: p.probabilities,
        class_names: model.class_names.clone(),
    })
}

/// Embeds `image` with the configured embedder, then predicts.
pub fn predict_image(model: &ModelArtifact, backends: &Backends, image: &[u8]) -> Result<PredictionOutput> {
    let id = backends.embedder.identifier();
    if let Some(trained) = &model.embedder {
        if *trained != id {
            log::warn!("model was trained on `{trained}` embeddings but `{id}` is configured");
        }
    }
    let e = embed_image(&*backends.embedder, image)?;
    predict_embedding(model, &e.to_f64())
}
