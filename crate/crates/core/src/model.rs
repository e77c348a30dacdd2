//! Shared domain types: context grammars, prompts, images, and dataset manifests.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filter::FilterParams;
use crate::prompt::{self, WeightedTerm};

/// Dimensionality of every image embedding.
pub const EMBEDDING_DIM: usize = 512;

/// Name of the mandatory context that carries the class label.
pub const CATEGORY: &str = "category";

/// One user-supplied context (e.g. location) and its candidate options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Context {
    pub name: String,
    pub options: Vec<String>,
    #[serde(default)]
    pub mandatory: bool,
}

impl Context {
    pub fn new(name: impl Into<String>, options: &[&str]) -> Self {
        let name = name.into();
        let mandatory = name == CATEGORY;
        Context {
            name,
            options: options.iter().map(|s| s.to_string()).collect(),
            mandatory,
        }
    }
}

/// Ordered list of contexts describing a dataset. Earlier contexts carry more weight.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextGrammar {
    pub contexts: Vec<Context>,
}

impl ContextGrammar {
    pub fn new(contexts: Vec<Context>) -> Result<Self> {
        let grammar = ContextGrammar { contexts };
        grammar.validate()?;
        Ok(grammar)
    }

    pub fn validate(&self) -> Result<()> {
        let categories: Vec<&Context> = self.contexts.iter().filter(|c| c.name == CATEGORY).collect();
        match categories.as_slice() {
            [] => return Err(Error::validation("contexts", "the `category` context is required")),
            [c] if !c.mandatory => {
                return Err(Error::validation("contexts.category.mandatory", "the `category` context must be mandatory"))
            }
            [_] => {}
            _ => return Err(Error::validation("contexts", "exactly one `category` context may exist")),
        }
        let mut names = HashSet::new();
        for ctx in &self.contexts {
            if ctx.name.trim().is_empty() {
                return Err(Error::validation("contexts.name", "context names must be non-empty"));
            }
            if !names.insert(ctx.name.as_str()) {
                return Err(Error::validation("contexts.name", format!("duplicate context `{}`", ctx.name)));
            }
            if ctx.options.is_empty() {
                return Err(Error::validation(
                    format!("contexts.{}.options", ctx.name),
                    "option list must be non-empty",
                ));
            }
            let mut seen = HashSet::new();
            for opt in &ctx.options {
                if !seen.insert(opt.as_str()) {
                    return Err(Error::validation(
                        format!("contexts.{}.options", ctx.name),
                        format!("duplicate option `{opt}`"),
                    ));
                }
                prompt::validate_term(opt).map_err(|e| {
                    Error::validation(format!("contexts.{}.options", ctx.name), e.to_string())
                })?;
            }
        }
        Ok(())
    }

    pub fn category(&self) -> Option<&Context> {
        self.contexts.iter().find(|c| c.name == CATEGORY)
    }

    /// Sorted distinct class labels (the category options).
    pub fn class_labels(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.category().map(|c| c.options.iter().collect()).unwrap_or_default();
        set.into_iter().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assignment {
    pub context: String,
    pub option: String,
}

/// One choice per context, in grammar order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextCombination {
    pub assignments: Vec<Assignment>,
    pub class_label: String,
}

impl ContextCombination {
    pub fn options(&self) -> impl Iterator<Item = &str> {
        self.assignments.iter().map(|a| a.option.as_str())
    }

    pub fn option_for(&self, context: &str) -> Option<&str> {
        self.assignments
            .iter()
            .find(|a| a.context == context)
            .map(|a| a.option.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        match self.option_for(CATEGORY) {
            Some(label) if label == self.class_label => Ok(()),
            Some(_) => Err(Error::validation("combination.class_label", "must equal the category assignment")),
            None => Err(Error::validation("combination.assignments", "missing category assignment")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSource {
    Engineered,
    Simplistic,
    Extracted,
}

/// A prompt (engineered, simplistic, or caption-extracted) with attention-weighted terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PromptRecordDoc", into = "PromptRecordDoc")]
pub struct PromptRecord {
    pub id: String,
    pub terms: Vec<WeightedTerm>,
    pub source: PromptSource,
    pub combination: Option<ContextCombination>,
    pub class_label: String,
}

impl PromptRecord {
    pub fn text(&self) -> String {
        prompt::serialize_prompt(&self.terms).expect("validated prompt terms")
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("prompts[{}].{f}", self.id);
        if self.id.is_empty() {
            return Err(Error::validation("prompts.id", "prompt ids must be non-empty"));
        }
        if self.terms.is_empty() {
            return Err(Error::validation(field("terms"), "prompt has no terms"));
        }
        prompt::serialize_prompt(&self.terms).map_err(|e| Error::validation(field("terms"), e.to_string()))?;
        match (&self.source, &self.combination) {
            (PromptSource::Extracted, Some(_)) => {
                return Err(Error::validation(field("combination"), "extracted prompts carry no combination"))
            }
            (_, Some(c)) => {
                c.validate()?;
                if c.class_label != self.class_label {
                    return Err(Error::validation(field("class_label"), "must match the combination label"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptRecordDoc {
    id: String,
    text: String,
    source: PromptSource,
    class_label: String,
    combination: Option<ContextCombination>,
}

impl TryFrom<PromptRecordDoc> for PromptRecord {
    type Error = Error;

    fn try_from(doc: PromptRecordDoc) -> Result<Self> {
        let terms = prompt::parse_prompt(&doc.text)?;
        Ok(PromptRecord {
            id: doc.id,
            terms,
            source: doc.source,
            combination: doc.combination,
            class_label: doc.class_label,
        })
    }
}

impl From<PromptRecord> for PromptRecordDoc {
    fn from(p: PromptRecord) -> Self {
        PromptRecordDoc {
            text: p.text(),
            id: p.id,
            source: p.source,
            class_label: p.class_label,
            combination: p.combination,
        }
    }
}

/// A 512-dimensional finite feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f32>);

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.len() != EMBEDDING_DIM {
            return Err(Error::DimensionMismatch {
                expected: EMBEDDING_DIM,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("embedding", "values must be finite"));
        }
        Ok(Embedding(values))
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generated,
    StyleTransferred,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterVerdict {
    Kept,
    RemovedDuplicate,
    RemovedOutlier,
    Pending,
}

/// One generated image: blob reference, embedding, and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub class_label: String,
    /// Hex SHA-256 of the PNG payload, stored as `blobs/<image_ref>.png`.
    pub image_ref: String,
    pub embedding: Embedding,
    pub prompt_id: String,
    pub seed: u64,
    pub stage_history: Vec<Stage>,
    pub filter_verdict: FilterVerdict,
}

impl ImageRecord {
    pub fn is_kept(&self) -> bool {
        self.filter_verdict == FilterVerdict::Kept
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flow {
    AirGen,
    AirAug,
}

/// Configuration snapshot recorded with every manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSnapshot {
    pub flow: Flow,
    pub backends: BTreeMap<String, String>,
    pub seed: u64,
    pub images_per_prompt: u32,
    pub image_size: u32,
    pub use_rewriter: bool,
    pub use_style_transfer: bool,
    pub style_domain: Option<String>,
    pub use_filter: bool,
    pub filter: FilterParams,
    pub source_dataset: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub dataset_id: String,
    pub name: String,
    /// Bumped whenever verdicts are rewritten in place.
    pub revision: u64,
    pub grammar: Option<ContextGrammar>,
    pub prompts: Vec<PromptRecord>,
    pub images: Vec<ImageRecord>,
    pub classes: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub pipeline_config: PipelineSnapshot,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if let Some(g) = &self.grammar {
            g.validate()?;
        }
        let sorted: Vec<String> = self.classes.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        if sorted != self.classes {
            return Err(Error::validation("classes", "must be sorted and distinct"));
        }
        if let Some(g) = &self.grammar {
            if g.class_labels() != self.classes {
                return Err(Error::validation("classes", "must equal the grammar's category options"));
            }
        }
        let mut prompt_ids = HashSet::new();
        for p in &self.prompts {
            p.validate()?;
            if !prompt_ids.insert(p.id.as_str()) {
                return Err(Error::validation("prompts.id", format!("duplicate prompt id `{}`", p.id)));
            }
            if !self.classes.contains(&p.class_label) {
                return Err(Error::validation(
                    format!("prompts[{}].class_label", p.id),
                    format!("unknown class `{}`", p.class_label),
                ));
            }
        }
        let mut image_ids = HashSet::new();
        for img in &self.images {
            let field = |f: &str| format!("images[{}].{f}", img.id);
            if !image_ids.insert(img.id.as_str()) {
                return Err(Error::validation("images.id", format!("duplicate image id `{}`", img.id)));
            }
            if !prompt_ids.contains(img.prompt_id.as_str()) {
                return Err(Error::validation(
                    field("prompt_id"),
                    format!("references unknown prompt `{}`", img.prompt_id),
                ));
            }
            if !self.classes.contains(&img.class_label) {
                return Err(Error::validation(field("class_label"), format!("unknown class `{}`", img.class_label)));
            }
            if img.stage_history.first() != Some(&Stage::Generated) {
                return Err(Error::validation(field("stage_history"), "must begin with `generated`"));
            }
            let styled = img.stage_history.iter().filter(|s| **s == Stage::StyleTransferred).count();
            let generated = img.stage_history.iter().filter(|s| **s == Stage::Generated).count();
            if styled > 1 || generated > 1 {
                return Err(Error::validation(field("stage_history"), "each stage may appear at most once"));
            }
            if img.image_ref.len() != 64 || !img.image_ref.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(Error::validation(field("image_ref"), "must be a 256-bit hex hash"));
            }
        }
        Ok(())
    }

    pub fn kept_images(&self) -> impl Iterator<Item = &ImageRecord> {
        self.images.iter().filter(|i| i.is_kept())
    }

    pub fn prompt(&self, id: &str) -> Option<&PromptRecord> {
        self.prompts.iter().find(|p| p.id == id)
    }

    /// Image counts per class and verdict.
    pub fn summary(&self) -> BTreeMap<String, BTreeMap<FilterVerdict, usize>> {
        let mut out: BTreeMap<String, BTreeMap<FilterVerdict, usize>> =
            self.classes.iter().map(|c| (c.clone(), BTreeMap::new())).collect();
        for img in &self.images {
            *out.entry(img.class_label.clone()).or_default().entry(img.filter_verdict).or_default() += 1;
        }
        out
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a sequence of length-prefixed parts, so `("ab","c")` and `("a","bc")` differ.
pub fn hash_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// Deterministic identifier `<prefix>-<16 hex>` derived from `parts`.
pub fn derive_id(prefix: &str, parts: &[&[u8]]) -> String {
    let digest = hash_parts(parts);
    format!("{prefix}-{}", hex::encode(&digest[..8]))
}
