//! On-disk layout of the service data directory.
//!
//! ```text
//! <root>/datasets/<dataset_id>/   dataset directories
//! <root>/models/<model_id>/       model.json + metrics.json
//! <root>/events/<job_id>.events.jsonl
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use air_core::{Error, Result};

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

/// Ids become path components, so only `[A-Za-z0-9_-]` is accepted.
pub fn check_id(kind: &str, id: &str) -> Result<()> {
    if id.is_empty() || id.len() > 128 || !id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_') {
        return Err(Error::validation(kind, format!("invalid id `{id}`")));
    }
    Ok(())
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for sub in ["datasets", "models", "events"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::Persistence { path: dir.clone(), source: e })?;
        }
        Ok(Store { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dataset_dir(&self, id: &str) -> Result<PathBuf> {
        check_id("dataset_id", id)?;
        Ok(self.root.join("datasets").join(id))
    }

    pub fn model_dir(&self, id: &str) -> Result<PathBuf> {
        check_id("model_id", id)?;
        Ok(self.root.join("models").join(id))
    }

    pub fn events_dir(&self) -> PathBuf {
        self.root.join("events")
    }
}
