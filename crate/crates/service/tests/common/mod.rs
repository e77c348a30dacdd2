#![allow(dead_code)]

pub mod oracle;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use air_core::backend::mock::MockEmbedder;
use air_core::filter::FilterParams;
use air_core::model::{
    sha256_hex, Context, ContextGrammar, DatasetManifest, Embedding, FilterVerdict, Flow, ImageRecord, PipelineSnapshot,
    PromptRecord, PromptSource, Stage,
};
use air_core::prompt::WeightedTerm;

#[derive(Debug, Clone, Deserialize)]
pub struct ClassSpec {
    pub label: String,
    pub count: usize,
    /// `(source index, extra copies)`.
    pub duplicates: Vec<(usize, usize)>,
    pub outliers: usize,
}

#[derive(Debug, Clone, Deserialize)]
pub struct FilterFixture {
    pub name: String,
    pub seed: u64,
    pub sigma: f64,
    pub beta: f64,
    pub retention: f64,
    pub alpha: Option<f64>,
    pub per_class: bool,
    pub classes: Vec<ClassSpec>,
}

#[derive(Debug, Deserialize)]
pub struct FixtureFile {
    pub filter: Vec<FilterFixture>,
    pub retention: FilterFixture,
}

pub fn fixtures() -> FixtureFile {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/filter_fixtures.json");
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

impl FilterFixture {
    pub fn params(&self) -> FilterParams {
        FilterParams {
            beta: self.beta,
            retention_target: self.retention,
            alpha: self.alpha,
            per_class: self.per_class,
            ..FilterParams::default()
        }
    }
}

/// A fixture materialised as a manifest, plus the id groups of planted exact duplicates.
pub struct BuiltFixture {
    pub manifest: DatasetManifest,
    pub duplicate_groups: Vec<Vec<String>>,
    pub outliers: Vec<String>,
}

fn image(id: String, label: &str, prompt_id: &str, values: Vec<f32>) -> ImageRecord {
    ImageRecord {
        image_ref: sha256_hex(id.as_bytes()),
        id,
        class_label: label.to_string(),
        embedding: Embedding::new(values).unwrap(),
        prompt_id: prompt_id.to_string(),
        seed: 0,
        stage_history: vec![Stage::Generated],
        filter_verdict: FilterVerdict::Pending,
    }
}

pub fn build(fx: &FilterFixture) -> BuiltFixture {
    let embedder = MockEmbedder::new(fx.sigma);
    let mut images = Vec::new();
    let mut prompts = Vec::new();
    let mut duplicate_groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut outliers = Vec::new();
    for (c, spec) in fx.classes.iter().enumerate() {
        let prompt_id = format!("p-{c}");
        prompts.push(PromptRecord {
            id: prompt_id.clone(),
            terms: vec![WeightedTerm::plain(spec.label.clone())],
            source: PromptSource::Simplistic,
            combination: None,
            class_label: spec.label.clone(),
        });
        let base: Vec<Vec<f32>> = (0..spec.count)
            .map(|i| {
                let content = format!("{}/{}/{}/{i}", fx.name, fx.seed, spec.label);
                embedder.embed_label(&spec.label, content.as_bytes()).values().to_vec()
            })
            .collect();
        for (i, v) in base.iter().enumerate() {
            images.push(image(format!("{}-c{c}-{i:03}", fx.name), &spec.label, &prompt_id, v.clone()));
        }
        for (d, &(src, copies)) in spec.duplicates.iter().enumerate() {
            let src_id = format!("{}-c{c}-{src:03}", fx.name);
            let group = duplicate_groups.entry(src_id.clone()).or_insert_with(|| vec![src_id.clone()]);
            for m in 0..copies {
                let id = format!("{src_id}-dup{d}{m}");
                group.push(id.clone());
                images.push(image(id, &spec.label, &prompt_id, base[src].clone()));
            }
        }
        for m in 0..spec.outliers {
            let id = format!("{}-c{c}-out{m}", fx.name);
            let far = embedder.embed_label(&format!("far/{}/{m}", spec.label), id.as_bytes());
            outliers.push(id.clone());
            images.push(image(id, &spec.label, &prompt_id, far.values().to_vec()));
        }
    }
    images.shuffle(&mut ChaCha8Rng::seed_from_u64(fx.seed));
    let mut classes: Vec<String> = fx.classes.iter().map(|c| c.label.clone()).collect();
    classes.sort();
    BuiltFixture {
        manifest: DatasetManifest {
            dataset_id: format!("ds-{}", fx.name),
            name: fx.name.clone(),
            revision: 1,
            grammar: None,
            prompts,
            images,
            classes,
            created_at: chrono::DateTime::UNIX_EPOCH,
            pipeline_config: PipelineSnapshot {
                flow: Flow::AirGen,
                backends: BTreeMap::new(),
                seed: fx.seed,
                images_per_prompt: 1,
                image_size: 512,
                use_rewriter: false,
                use_style_transfer: false,
                style_domain: None,
                use_filter: true,
                filter: fx.params(),
                source_dataset: None,
            },
        },
        duplicate_groups: duplicate_groups.into_values().collect(),
        outliers,
    }
}

/// Two-class grammar with four combinations.
pub fn wildfire_grammar() -> ContextGrammar {
    ContextGrammar::new(vec![
        Context::new("category", &["small fire and smoke", "normal"]),
        Context::new("location", &["tropical forest", "boreal forest"]),
        Context::new("view", &["drone's view"]),
        Context::new("time", &["morning"]),
    ])
    .unwrap()
}

/// Relative path → SHA-256 of every file under `dir`.
pub fn dir_digest(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, sha256_hex(&std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// The `air` binary with mock backends, fixed timestamps, and separable mock embeddings.
pub fn air() -> std::process::Command {
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_air"));
    cmd.env("AIR_BACKEND_MODE", "mock")
        .env("AIR_MOCK_EMBED_SIGMA", "0.3")
        .env_remove("SOURCE_DATE_EPOCH")
        .env_remove("AIR_AUTH_TOKEN");
    cmd
}

/// Runs `air` with `args`, panicking with stderr on failure; returns parsed stdout.
pub fn run_air(args: &[&str]) -> serde_json::Value {
    let out = air().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "air {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    if out.stdout.is_empty() {
        serde_json::Value::Null
    } else {
        serde_json::from_slice(&out.stdout).unwrap()
    }
}

pub fn write_grammar(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("grammar.json");
    std::fs::write(&path, serde_json::to_string_pretty(&wildfire_grammar()).unwrap()).unwrap();
    path
}
