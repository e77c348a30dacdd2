//! The AIR-Gen and AIR-Aug flows: prompts → generate → style → embed →
//! filter → persist, resumable through a per-item journal.

pub mod jobs;
mod journal;

use std::collections::HashSet;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::backend::{self, Backends, IMAGE_SIZES};
use crate::canonical;
use crate::error::{Error, Result};
use crate::filter::{filter_dataset, keep_all, FilterParams, FilterReport};
use crate::manifest::{self, BLOBS_DIR};
use crate::model::{
    derive_id, hash_parts, ContextGrammar, DatasetManifest, Embedding, FilterVerdict, Flow, ImageRecord,
    PipelineSnapshot, PromptRecord, Stage,
};
use crate::prompt::{self, RewriteRequest, DEFAULT_MAX_TERMS, DEFAULT_TEMPLATE_ID};

pub use journal::PENDING_DIR;
use journal::{Entry, Journal};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Dataset name; defaults to the flow name.
    pub name: Option<String>,
    pub images_per_prompt: u32,
    pub image_size: u32,
    pub use_rewriter: bool,
    pub use_style_transfer: bool,
    pub style_domain: Option<String>,
    pub use_filter: bool,
    pub filter: FilterParams,
    pub seed: u64,
    /// Worker threads; never affects outputs.
    pub parallelism: usize,
    pub instruction_template_id: String,
    pub max_terms: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            name: None,
            images_per_prompt: 8,
            image_size: 512,
            use_rewriter: true,
            use_style_transfer: false,
            style_domain: None,
            use_filter: true,
            filter: FilterParams::default(),
            seed: 0,
            parallelism: 4,
            instruction_template_id: DEFAULT_TEMPLATE_ID.to_string(),
            max_terms: DEFAULT_MAX_TERMS,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, backends: &Backends) -> Result<()> {
        if self.images_per_prompt == 0 {
            return Err(Error::validation("images_per_prompt", "must be ≥ 1"));
        }
        if !IMAGE_SIZES.contains(&self.image_size) {
            return Err(Error::validation(
                "image_size",
                format!("{} not in {IMAGE_SIZES:?}", self.image_size),
            ));
        }
        if self.parallelism == 0 || self.parallelism > backends.max_parallel {
            return Err(Error::validation(
                "parallelism",
                format!("{} not in [1, {}]", self.parallelism, backends.max_parallel),
            ));
        }
        if self.use_style_transfer && self.style_domain.is_none() {
            return Err(Error::validation("style_domain", "required when use_style_transfer is set"));
        }
        if prompt::template(&self.instruction_template_id).is_none() {
            return Err(Error::validation(
                "instruction_template_id",
                format!("unknown template `{}`", self.instruction_template_id),
            ));
        }
        if self.max_terms == 0 {
            return Err(Error::validation("max_terms", "must be positive"));
        }
        self.filter.validate()
    }

    /// Canonical form with output-neutral fields removed.
    fn fingerprint(&self) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        value.as_object_mut().expect("struct").remove("parallelism");
        canonical::to_line(&value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    Prompts,
    Generate,
    Style,
    Embed,
    Filter,
    Persist,
}

impl PipelineStage {
    pub const ALL: [PipelineStage; 6] = [
        PipelineStage::Prompts,
        PipelineStage::Generate,
        PipelineStage::Style,
        PipelineStage::Embed,
        PipelineStage::Filter,
        PipelineStage::Persist,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineStage::Prompts => "prompts",
            PipelineStage::Generate => "generate",
            PipelineStage::Style => "style",
            PipelineStage::Embed => "embed",
            PipelineStage::Filter => "filter",
            PipelineStage::Persist => "persist",
        }
    }

    /// Share of overall progress.
    fn weight(self) -> f64 {
        match self {
            PipelineStage::Prompts => 0.05,
            PipelineStage::Generate => 0.45,
            PipelineStage::Style => 0.15,
            PipelineStage::Embed => 0.2,
            PipelineStage::Filter => 0.1,
            PipelineStage::Persist => 0.05,
        }
    }

    fn offset(self) -> f64 {
        Self::ALL.iter().take_while(|s| **s != self).fold(0.0, |acc, s| acc + s.weight())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressUpdate {
    pub stage: PipelineStage,
    pub progress: f64,
    pub message: String,
}

pub trait EventSink: Send + Sync {
    fn emit(&self, update: ProgressUpdate);
}

pub struct NullEvents;

impl EventSink for NullEvents {
    fn emit(&self, _: ProgressUpdate) {}
}

impl<F: Fn(ProgressUpdate) + Send + Sync> EventSink for F {
    fn emit(&self, update: ProgressUpdate) {
        self(update)
    }
}

/// Backends, event sink and cancellation flag for one run.
#[derive(Clone, Copy)]
pub struct RunContext<'a> {
    pub backends: &'a Backends,
    pub events: &'a dyn EventSink,
    pub cancel: Option<&'a AtomicBool>,
}

impl<'a> RunContext<'a> {
    pub fn new(backends: &'a Backends) -> Self {
        RunContext {
            backends,
            events: &NullEvents,
            cancel: None,
        }
    }

    fn check_cancel(&self) -> Result<()> {
        match self.cancel {
            Some(flag) if flag.load(Ordering::SeqCst) => Err(Error::Cancelled),
            _ => Ok(()),
        }
    }
}

/// Emits monotone progress for one stage; item completions are serialised
/// so concurrent workers never report out of order.
struct StageTracker<'a> {
    ctx: RunContext<'a>,
    stage: PipelineStage,
    total: usize,
    done: Mutex<usize>,
}

impl<'a> StageTracker<'a> {
    fn start(ctx: RunContext<'a>, stage: PipelineStage, total: usize, message: impl Into<String>) -> Self {
        ctx.events.emit(ProgressUpdate {
            stage,
            progress: stage.offset(),
            message: message.into(),
        });
        StageTracker {
            ctx,
            stage,
            total,
            done: Mutex::new(0),
        }
    }

    fn item(&self, message: impl Into<String>) {
        let mut done = self.done.lock().unwrap();
        *done += 1;
        let frac = *done as f64 / self.total.max(1) as f64;
        self.ctx.events.emit(ProgressUpdate {
            stage: self.stage,
            progress: (self.stage.offset() + self.stage.weight() * frac).min(1.0),
            message: message.into(),
        });
    }

    fn finish(&self, message: impl Into<String>) {
        self.ctx.events.emit(ProgressUpdate {
            stage: self.stage,
            progress: (self.stage.offset() + self.stage.weight()).min(1.0),
            message: message.into(),
        });
    }
}

/// Maps `f` over `items` on up to `workers` threads, returning results in
/// input order. The first failure (by index) is returned; remaining items
/// are abandoned.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    ctx: RunContext<'_>,
    f: impl Fn(&T) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let result = ctx.check_cancel().and_then(|_| f(&items[i]));
                if result.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    let mut out = Vec::with_capacity(items.len());
    for slot in slots {
        match slot.into_inner().unwrap() {
            Some(Ok(r)) => out.push(r),
            Some(Err(e)) => return Err(e),
            None => {}
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub manifest: DatasetManifest,
    pub filter_report: Option<FilterReport>,
}

/// `SOURCE_DATE_EPOCH` if set, else the Unix epoch for all-mock runs (so
/// output is reproducible), else the current time.
fn creation_time(backends: &Backends) -> DateTime<Utc> {
    if let Some(ts) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse::<i64>().ok()) {
        if let Some(t) = DateTime::from_timestamp(ts, 0) {
            return t;
        }
    }
    if backends.is_all_mock() {
        DateTime::UNIX_EPOCH
    } else {
        Utc::now()
    }
}

pub fn image_seed(job_seed: u64, prompt_id: &str, index: u32) -> u64 {
    let h = hash_parts(&[prompt_id.as_bytes(), &index.to_le_bytes()]);
    job_seed ^ u64::from_le_bytes(h[..8].try_into().unwrap())
}

pub fn image_id(prompt_id: &str, index: u32) -> String {
    derive_id("img", &[prompt_id.as_bytes(), &index.to_le_bytes()])
}

struct GenItem<'p> {
    prompt: &'p PromptRecord,
    id: String,
    seed: u64,
}

struct Produced {
    blob: String,
    styled: bool,
    embedding: Embedding,
}

/// Shared tail of both flows: generate, style, embed, filter, persist.
#[allow(clippy::too_many_arguments)]
fn produce(
    flow: Flow,
    dataset_id: String,
    grammar: Option<ContextGrammar>,
    classes: Vec<String>,
    prompts: Vec<PromptRecord>,
    images_per_prompt: u32,
    source_dataset: Option<String>,
    config: &PipelineConfig,
    ctx: RunContext<'_>,
    journal: Journal,
    out_dir: &Path,
) -> Result<PipelineOutput> {
    let backends = ctx.backends;
    let items: Vec<GenItem> = prompts
        .iter()
        .flat_map(|p| {
            (0..images_per_prompt).map(move |index| GenItem {
                prompt: p,
                id: image_id(&p.id, index),
                seed: image_seed(config.seed, &p.id, index),
            })
        })
        .collect();
    let workers = config.parallelism;

    let tracker = StageTracker::start(ctx, PipelineStage::Generate, items.len(), format!("generating {} images", items.len()));
    let generated = parallel_map(&items, workers, ctx, |item| {
        if let Some(Entry::Generate { blob, .. }) = journal.get("generate", &item.id) {
            if journal.blob_path(blob).exists() {
                tracker.item(format!("{} (resumed)", item.id));
                return Ok(blob.clone());
            }
        }
        let bytes = backend::generate_image(&*backends.text_to_image, item.prompt, item.seed, config.image_size)?;
        let blob = journal.store_blob(&bytes)?;
        journal.record(&Entry::Generate {
            key: item.id.clone(),
            blob: blob.clone(),
        })?;
        tracker.item(item.id.clone());
        Ok(blob)
    })?;
    tracker.finish("generation complete");

    let style_domain = config.style_domain.as_deref().filter(|_| config.use_style_transfer);
    let finals: Vec<(String, bool)> = match style_domain {
        Some(domain) => {
            let tracker = StageTracker::start(ctx, PipelineStage::Style, items.len(), format!("style transfer to `{domain}`"));
            let pairs: Vec<(&GenItem, &String)> = items.iter().zip(&generated).collect();
            let styled = parallel_map(&pairs, workers, ctx, |(item, blob)| {
                if let Some(Entry::Style { blob, .. }) = journal.get("style", &item.id) {
                    if journal.blob_path(blob).exists() {
                        tracker.item(format!("{} (resumed)", item.id));
                        return Ok((blob.clone(), true));
                    }
                }
                let bytes = journal.load_blob(blob)?;
                let out = backend::style_transfer(&*backends.style_transfer, &bytes, domain)?;
                let styled = journal.store_blob(&out)?;
                journal.record(&Entry::Style {
                    key: item.id.clone(),
                    blob: styled.clone(),
                })?;
                tracker.item(item.id.clone());
                Ok((styled, true))
            })?;
            tracker.finish("style transfer complete");
            styled
        }
        None => {
            StageTracker::start(ctx, PipelineStage::Style, 0, "style transfer disabled").finish("skipped");
            generated.into_iter().map(|b| (b, false)).collect()
        }
    };

    let tracker = StageTracker::start(ctx, PipelineStage::Embed, items.len(), "embedding images");
    let pairs: Vec<(&GenItem, &(String, bool))> = items.iter().zip(&finals).collect();
    let produced = parallel_map(&pairs, workers, ctx, |(item, (blob, styled))| {
        if let Some(Entry::Embed { embedding, .. }) = journal.get("embed", &item.id) {
            if let Ok(e) = Embedding::new(embedding.clone()) {
                tracker.item(format!("{} (resumed)", item.id));
                return Ok(Produced {
                    blob: blob.clone(),
                    styled: *styled,
                    embedding: e,
                });
            }
        }
        let bytes = journal.load_blob(blob)?;
        let embedding = backend::embed_image(&*backends.embedder, &bytes)?;
        journal.record(&Entry::Embed {
            key: item.id.clone(),
            embedding: embedding.values().to_vec(),
        })?;
        tracker.item(item.id.clone());
        Ok(Produced {
            blob: blob.clone(),
            styled: *styled,
            embedding,
        })
    })?;
    tracker.finish("embedding complete");
    ctx.check_cancel()?;

    let images: Vec<ImageRecord> = items
        .iter()
        .zip(produced)
        .map(|(item, p)| ImageRecord {
            id: item.id.clone(),
            class_label: item.prompt.class_label.clone(),
            image_ref: p.blob,
            embedding: p.embedding,
            prompt_id: item.prompt.id.clone(),
            seed: item.seed,
            stage_history: if p.styled {
                vec![Stage::Generated, Stage::StyleTransferred]
            } else {
                vec![Stage::Generated]
            },
            filter_verdict: FilterVerdict::Pending,
        })
        .collect();

    let pipeline_config = PipelineSnapshot {
        flow,
        backends: backends.identifiers(),
        seed: config.seed,
        images_per_prompt,
        image_size: config.image_size,
        use_rewriter: config.use_rewriter && flow == Flow::AirGen,
        use_style_transfer: config.use_style_transfer,
        style_domain: style_domain.map(str::to_string),
        use_filter: config.use_filter,
        filter: config.filter.clone(),
        source_dataset,
    };
    let default_name = match flow {
        Flow::AirGen => "air-gen",
        Flow::AirAug => "air-aug",
    };
    let pending = DatasetManifest {
        dataset_id,
        name: config.name.clone().unwrap_or_else(|| default_name.to_string()),
        revision: 1,
        grammar,
        prompts,
        images,
        classes,
        created_at: creation_time(backends),
        pipeline_config,
    };

    let tracker = StageTracker::start(ctx, PipelineStage::Filter, 1, "filtering");
    let (mut manifest, filter_report) = if config.use_filter {
        let (m, report) = filter_dataset(&pending, &config.filter)?;
        tracker.item(format!(
            "removed {} duplicates, {} outliers",
            report.removed_duplicates.len(),
            report.removed_outliers.len()
        ));
        (m, Some(report))
    } else {
        tracker.item("filter disabled; all images kept");
        (keep_all(&pending), None)
    };
    manifest.revision = 1;
    ctx.check_cancel()?;

    let tracker = StageTracker::start(ctx, PipelineStage::Persist, 1, format!("writing {}", out_dir.display()));
    persist(&manifest, &journal, out_dir)?;
    journal.remove()?;
    tracker.item("dataset written");
    Ok(PipelineOutput { manifest, filter_report })
}

/// Moves referenced blobs into `<out>/blobs`, prunes stale ones, and writes
/// the manifest files.
fn persist(manifest: &DatasetManifest, journal: &Journal, out_dir: &Path) -> Result<()> {
    let blobs = out_dir.join(BLOBS_DIR);
    fs::create_dir_all(&blobs).map_err(|e| Error::io(&blobs, e))?;
    let referenced: HashSet<&str> = manifest.images.iter().map(|i| i.image_ref.as_str()).collect();
    for hash in &referenced {
        let dest = manifest::blob_path(out_dir, hash);
        if !dest.exists() {
            let src = journal.blob_path(hash);
            fs::rename(&src, &dest).map_err(|e| Error::io(&src, e))?;
        }
    }
    for entry in fs::read_dir(&blobs).map_err(|e| Error::io(&blobs, e))? {
        let path = entry.map_err(|e| Error::io(&blobs, e))?.path();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        if !referenced.contains(stem) {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    manifest::save_dataset(manifest, out_dir)
}

fn prepare_out(out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))
}

pub fn gen_dataset_id(grammar: &ContextGrammar, config: &PipelineConfig, backends: &Backends) -> Result<String> {
    let parts = [
        canonical::to_line(grammar)?,
        config.fingerprint()?,
        canonical::to_line(&backends.identifiers())?,
    ];
    Ok(derive_id("ds", &[b"air-gen", parts[0].as_bytes(), parts[1].as_bytes(), parts[2].as_bytes()]))
}

pub fn aug_dataset_id(source: &DatasetManifest, config: &PipelineConfig, backends: &Backends) -> Result<String> {
    let parts = [
        source.dataset_id.clone(),
        source.revision.to_string(),
        config.fingerprint()?,
        canonical::to_line(&backends.identifiers())?,
    ];
    Ok(derive_id(
        "ds",
        &[b"air-aug", parts[0].as_bytes(), parts[1].as_bytes(), parts[2].as_bytes(), parts[3].as_bytes()],
    ))
}

/// Builds a dataset from a context grammar and writes it to `out_dir`.
pub fn run_air_gen(grammar: &ContextGrammar, config: &PipelineConfig, ctx: RunContext<'_>, out_dir: &Path) -> Result<PipelineOutput> {
    grammar.validate()?;
    config.validate(ctx.backends)?;
    prepare_out(out_dir)?;
    let dataset_id = gen_dataset_id(grammar, config, ctx.backends)?;
    let journal = Journal::open(out_dir, &dataset_id)?;

    let combinations = prompt::enumerate_combinations(grammar)?;
    let tracker = StageTracker::start(ctx, PipelineStage::Prompts, combinations.len(), format!("{} combinations", combinations.len()));
    let prompts = parallel_map(&combinations, config.parallelism, ctx, |combination| {
        let key = prompt::prompt_id_for(combination);
        if let Some(Entry::Prompts { prompt, .. }) = journal.get("prompts", &key) {
            tracker.item(format!("{key} (resumed)"));
            return Ok(prompt.clone());
        }
        let record = if config.use_rewriter {
            let request = RewriteRequest {
                combination: combination.clone(),
                instruction_template_id: config.instruction_template_id.clone(),
                max_terms: config.max_terms,
            };
            prompt::engineer_prompt(&request, &*ctx.backends.rewriter)?
        } else {
            prompt::simplistic_prompt(combination)
        };
        journal.record(&Entry::Prompts {
            key: key.clone(),
            prompt: record.clone(),
        })?;
        tracker.item(format!("{key}: {}", record.text()));
        Ok(record)
    })?;
    tracker.finish("prompts ready");

    produce(
        Flow::AirGen,
        dataset_id,
        Some(grammar.clone()),
        grammar.class_labels(),
        prompts,
        config.images_per_prompt,
        None,
        config,
        ctx,
        journal,
        out_dir,
    )
}

/// Replicates the kept images of `source` one-to-one through captioning and
/// regeneration, writing the new dataset to `out_dir`. Source blobs are read
/// from `source_dir`.
pub fn run_air_aug(
    source: &DatasetManifest,
    source_dir: &Path,
    config: &PipelineConfig,
    ctx: RunContext<'_>,
    out_dir: &Path,
) -> Result<PipelineOutput> {
    source.validate()?;
    config.validate(ctx.backends)?;
    let kept: Vec<&ImageRecord> = source.kept_images().collect();
    if kept.is_empty() {
        return Err(Error::InsufficientData {
            class: String::new(),
            message: "source dataset has no kept images".into(),
        });
    }
    prepare_out(out_dir)?;
    let dataset_id = aug_dataset_id(source, config, ctx.backends)?;
    let journal = Journal::open(out_dir, &dataset_id)?;

    let tracker = StageTracker::start(ctx, PipelineStage::Prompts, kept.len(), format!("captioning {} images", kept.len()));
    let prompts = parallel_map(&kept, config.parallelism, ctx, |img| {
        if let Some(Entry::Prompts { prompt, .. }) = journal.get("prompts", &img.id) {
            tracker.item(format!("{} (resumed)", img.id));
            return Ok(prompt.clone());
        }
        let bytes = manifest::read_blob(source_dir, &img.image_ref)?;
        let record = backend::caption_image(&*ctx.backends.captioner, &bytes, img)?;
        journal.record(&Entry::Prompts {
            key: img.id.clone(),
            prompt: record.clone(),
        })?;
        tracker.item(format!("{}: {}", img.id, record.text()));
        Ok(record)
    })?;
    tracker.finish("captions ready");

    produce(
        Flow::AirAug,
        dataset_id,
        source.grammar.clone(),
        source.classes.clone(),
        prompts,
        1,
        Some(source.dataset_id.clone()),
        config,
        ctx,
        journal,
        out_dir,
    )
}
