//! Dataset directory persistence.
//!
//! A dataset directory holds:
//!
//! - `manifest.json`: canonical JSON, `"air_schema": 1`
//! - `embeddings.bin`: `AIRE`, u32 LE count, u32 LE dim (512), then
//!   count×dim f32 LE values, row-major in manifest image order
//! - `prompts.jsonl`: one prompt record per line
//! - `blobs/<sha256 hex>.png`: image payloads, content-addressed
//!
//! All files are written to a temporary name and renamed into place.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::error::{Error, Result};
use crate::model::{
    sha256_hex, ContextGrammar, DatasetManifest, Embedding, FilterVerdict, ImageRecord, PipelineSnapshot,
    PromptRecord, Stage, EMBEDDING_DIM,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const PROMPTS_FILE: &str = "prompts.jsonl";
pub const BLOBS_DIR: &str = "blobs";
pub const EMBEDDINGS_MAGIC: &[u8; 4] = b"AIRE";
const LOCK_FILE: &str = ".air.lock";
const HEADER_LEN: usize = 12;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    air_schema: u32,
    dataset_id: String,
    name: String,
    revision: u64,
    grammar: Option<ContextGrammar>,
    prompts: Vec<PromptRecord>,
    images: Vec<ImageDoc>,
    classes: Vec<String>,
    created_at: DateTime<Utc>,
    pipeline_config: PipelineSnapshot,
    embeddings: EmbeddingsRef,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingsRef {
    file: String,
    count: usize,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageDoc {
    id: String,
    class_label: String,
    image_ref: String,
    /// Row in `embeddings.bin`.
    embedding_row: usize,
    prompt_id: String,
    seed: u64,
    stage_history: Vec<Stage>,
    filter_verdict: FilterVerdict,
}

/// Exclusive advisory lock on a dataset directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(Error::Conflict(format!("{} is locked by another writer", dir.display())))
            }
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Writes `bytes` to `path` via a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::validation("path", format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn encode_embeddings(rows: &[&Embedding]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + rows.len() * EMBEDDING_DIM * 4);
    out.extend_from_slice(EMBEDDINGS_MAGIC);
    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    out.extend_from_slice(&(EMBEDDING_DIM as u32).to_le_bytes());
    for row in rows {
        for v in row.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_embeddings(bytes: &[u8], expected_count: usize) -> Result<Vec<Embedding>> {
    let field = "embeddings.bin";
    if bytes.len() < HEADER_LEN || &bytes[..4] != EMBEDDINGS_MAGIC {
        return Err(Error::validation(field, "missing AIRE header"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if dim != EMBEDDING_DIM {
        return Err(Error::validation(field, format!("dim {dim} ≠ {EMBEDDING_DIM}")));
    }
    if count != expected_count {
        return Err(Error::validation(
            field,
            format!("count mismatch: header has {count} rows, manifest has {expected_count} images"),
        ));
    }
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * dim * 4 {
        return Err(Error::validation(
            field,
            format!("count mismatch: payload holds {} bytes, expected {}", payload.len(), count * dim * 4),
        ));
    }
    payload
        .chunks_exact(dim * 4)
        .map(|row| Embedding::new(row.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()))
        .collect()
}

fn prompts_jsonl(prompts: &[PromptRecord]) -> Result<String> {
    let mut out = String::new();
    for p in prompts {
        out.push_str(&canonical::to_line(p)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes `manifest` to `path` (normally `<dir>/manifest.json`) together with
/// the sibling `embeddings.bin` and `prompts.jsonl`. Identical manifests give
/// byte-identical files.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory does not exist"),
        ));
    }
    let _lock = DirLock::acquire(dir)?;
    let doc = ManifestDoc {
        air_schema: SCHEMA_VERSION,
        dataset_id: manifest.dataset_id.clone(),
        name: manifest.name.clone(),
        revision: manifest.revision,
        grammar: manifest.grammar.clone(),
        prompts: manifest.prompts.clone(),
        images: manifest
            .images
            .iter()
            .enumerate()
            .map(|(row, img)| ImageDoc {
                id: img.id.clone(),
                class_label: img.class_label.clone(),
                image_ref: img.image_ref.clone(),
                embedding_row: row,
                prompt_id: img.prompt_id.clone(),
                seed: img.seed,
                stage_history: img.stage_history.clone(),
                filter_verdict: img.filter_verdict,
            })
            .collect(),
        classes: manifest.classes.clone(),
        created_at: manifest.created_at,
        pipeline_config: manifest.pipeline_config.clone(),
        embeddings: EmbeddingsRef {
            file: EMBEDDINGS_FILE.to_string(),
            count: manifest.images.len(),
            dim: EMBEDDING_DIM,
        },
    };
    let rows: Vec<&Embedding> = manifest.images.iter().map(|i| &i.embedding).collect();
    write_atomic(&dir.join(EMBEDDINGS_FILE), &encode_embeddings(&rows))?;
    write_atomic(&dir.join(PROMPTS_FILE), prompts_jsonl(&manifest.prompts)?.as_bytes())?;
    write_atomic(path, canonical::to_string(&doc)?.as_bytes())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("air_schema").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        other => {
            return Err(Error::validation(
                "air_schema",
                format!("unsupported schema version {other:?}, expected {SCHEMA_VERSION}"),
            ))
        }
    }
    let doc: ManifestDoc = serde_json::from_value(value).map_err(|e| Error::validation("manifest.json", e.to_string()))?;
    if doc.embeddings.dim != EMBEDDING_DIM {
        return Err(Error::validation("embeddings.dim", format!("dim {} ≠ {EMBEDDING_DIM}", doc.embeddings.dim)));
    }
    if doc.embeddings.count != doc.images.len() {
        return Err(Error::validation(
            "embeddings.count",
            format!("count mismatch: {} rows for {} images", doc.embeddings.count, doc.images.len()),
        ));
    }
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let emb_path = dir.join(&doc.embeddings.file);
    let bytes = fs::read(&emb_path).map_err(|e| Error::io(&emb_path, e))?;
    let mut rows: Vec<Option<Embedding>> = decode_embeddings(&bytes, doc.images.len())?.into_iter().map(Some).collect();
    let mut images = Vec::with_capacity(doc.images.len());
    for img in doc.images {
        let embedding = rows
            .get_mut(img.embedding_row)
            .and_then(Option::take)
            .ok_or_else(|| Error::validation(format!("images[{}].embedding_row", img.id), "invalid or reused row"))?;
        images.push(ImageRecord {
            id: img.id,
            class_label: img.class_label,
            image_ref: img.image_ref,
            embedding,
            prompt_id: img.prompt_id,
            seed: img.seed,
            stage_history: img.stage_history,
            filter_verdict: img.filter_verdict,
        });
    }
    let manifest = DatasetManifest {
        dataset_id: doc.dataset_id,
        name: doc.name,
        revision: doc.revision,
        grammar: doc.grammar,
        prompts: doc.prompts,
        images,
        classes: doc.classes,
        created_at: doc.created_at,
        pipeline_config: doc.pipeline_config,
    };
    manifest.validate()?;
    Ok(manifest)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}

pub fn save_dataset(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    save_manifest(manifest, &manifest_path(dir))
}

pub fn load_dataset(dir: &Path) -> Result<DatasetManifest> {
    load_manifest(&manifest_path(dir))
}

pub fn blob_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(BLOBS_DIR).join(format!("{hash}.png"))
}

/// Stores `bytes` under its SHA-256 and returns the hex hash.
pub fn write_blob(dir: &Path, bytes: &[u8]) -> Result<String> {
    let hash = sha256_hex(bytes);
    let blobs = dir.join(BLOBS_DIR);
    fs::create_dir_all(&blobs).map_err(|e| Error::io(&blobs, e))?;
    let path = blob_path(dir, &hash);
    if !path.exists() {
        write_atomic(&path, bytes)?;
    }
    Ok(hash)
}

pub fn read_blob(dir: &Path, hash: &str) -> Result<Vec<u8>> {
    let path = blob_path(dir, hash);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if sha256_hex(&bytes) != hash {
        return Err(Error::validation("blobs", format!("{} does not match its hash", path.display())));
    }
    Ok(bytes)
}
