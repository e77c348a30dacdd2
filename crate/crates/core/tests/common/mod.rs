#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use air_core::model::{sha256_hex, Context, ContextGrammar};

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
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, sha256_hex(&fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
