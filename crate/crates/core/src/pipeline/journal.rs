//! Per-item completion records under `<out>/pending/`, used to resume an
//! interrupted run without redoing finished work.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{blob_path, write_blob};
use crate::model::PromptRecord;

pub const PENDING_DIR: &str = "pending";
const JOURNAL_FILE: &str = "journal.jsonl";
const RUN_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Entry {
    Prompts { key: String, prompt: PromptRecord },
    Generate { key: String, blob: String },
    Style { key: String, blob: String },
    Embed { key: String, embedding: Vec<f32> },
}

impl Entry {
    fn slot(&self) -> (&'static str, &str) {
        match self {
            Entry::Prompts { key, .. } => ("prompts", key),
            Entry::Generate { key, .. } => ("generate", key),
            Entry::Style { key, .. } => ("style", key),
            Entry::Embed { key, .. } => ("embed", key),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RunInfo {
    dataset_id: String,
}

pub struct Journal {
    dir: PathBuf,
    done: HashMap<(String, String), Entry>,
    file: Mutex<File>,
}

impl Journal {
    /// Opens the journal for `dataset_id`, discarding records left by a
    /// different run configuration.
    pub fn open(out_dir: &Path, dataset_id: &str) -> Result<Self> {
        let dir = out_dir.join(PENDING_DIR);
        let run_path = dir.join(RUN_FILE);
        let matches = fs::read_to_string(&run_path)
            .ok()
            .and_then(|t| serde_json::from_str::<RunInfo>(&t).ok())
            .is_some_and(|r| r.dataset_id == dataset_id);
        if !matches && dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        if !matches {
            let info = serde_json::to_string(&RunInfo {
                dataset_id: dataset_id.to_string(),
            })?;
            fs::write(&run_path, info).map_err(|e| Error::io(&run_path, e))?;
        }
        let path = dir.join(JOURNAL_FILE);
        let mut done = HashMap::new();
        if let Ok(f) = File::open(&path) {
            for line in BufReader::new(f).lines() {
                let Ok(line) = line else { break };
                // A torn final line from a crash is ignored.
                if let Ok(entry) = serde_json::from_str::<Entry>(&line) {
                    let (stage, key) = entry.slot();
                    done.insert((stage.to_string(), key.to_string()), entry);
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Journal {
            dir,
            done,
            file: Mutex::new(file),
        })
    }

    pub fn get(&self, stage: &str, key: &str) -> Option<&Entry> {
        self.done.get(&(stage.to_string(), key.to_string()))
    }

    pub fn record(&self, entry: &Entry) -> Result<()> {
        let mut line = serde_json::to_string(entry)?;
        line.push('\n');
        let mut f = self.file.lock().unwrap();
        f.write_all(line.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(self.dir.join(JOURNAL_FILE), e))
    }

    pub fn store_blob(&self, bytes: &[u8]) -> Result<String> {
        write_blob(&self.dir, bytes)
    }

    pub fn load_blob(&self, hash: &str) -> Result<Vec<u8>> {
        crate::manifest::read_blob(&self.dir, hash)
    }

    pub fn blob_path(&self, hash: &str) -> PathBuf {
        blob_path(&self.dir, hash)
    }

    pub fn remove(self) -> Result<()> {
        drop(self.file);
        fs::remove_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))
    }
}
