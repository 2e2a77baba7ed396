//! Append-only, content-addressed store of per-class perplexities.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub scorer_id: String,
    pub template_hash: String,
    /// External node ids.
    pub query: i64,
    pub example: i64,
    pub class: usize,
    digest: String,
}

impl CacheKey {
    pub fn new(scorer_id: &str, template_hash: &str, query: i64, example: i64, class: usize) -> Self {
        let mut h = Sha256::new();
        h.update(format!("{scorer_id}\n{template_hash}\n{query}\n{example}\n{class}"));
        Self {
            scorer_id: scorer_id.to_string(),
            template_hash: template_hash.to_string(),
            query,
            example,
            class,
            digest: hex::encode(h.finalize()),
        }
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Line {
    k: String,
    q: i64,
    e: i64,
    c: usize,
    ppl: f64,
    sid: String,
    th: String,
}

pub struct ScoreCache {
    path: Option<PathBuf>,
    entries: RwLock<HashMap<String, f64>>,
    writer: Mutex<Option<File>>,
}

impl ScoreCache {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
        }
    }

    /// Loads `path` if it exists and appends new entries to it. A trailing
    /// partial line (interrupted write) is discarded from the file.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        let mut keep_len = None;
        if path.exists() {
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            if complete < bytes.len() {
                log::warn!("{}: dropping truncated final line", path.display());
                keep_len = Some(complete as u64);
            }
            let text = std::str::from_utf8(&bytes[..complete])
                .map_err(|e| Error::bundle(&path, None, e.to_string()))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let l: Line = serde_json::from_str(line).map_err(|e| Error::bundle(&path, Some(i + 1), e.to_string()))?;
                entries.insert(l.k, l.ppl);
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        if let Some(len) = keep_len {
            file.set_len(len).map_err(|e| Error::io(&path, e))?;
        }
        Ok(Self {
            path: Some(path),
            entries: RwLock::new(entries),
            writer: Mutex::new(Some(file)),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &CacheKey) -> Option<f64> {
        self.entries.read().expect("cache lock").get(key.digest()).copied()
    }

    /// Records a value; an existing entry for the key is kept.
    pub fn insert(&self, key: &CacheKey, ppl: f64) -> Result<()> {
        let mut writer = self.writer.lock().expect("cache writer lock");
        {
            let mut entries = self.entries.write().expect("cache lock");
            if entries.contains_key(key.digest()) {
                return Ok(());
            }
            entries.insert(key.digest().to_string(), ppl);
        }
        if let Some(f) = writer.as_mut() {
            let line = Line {
                k: key.digest().to_string(),
                q: key.query,
                e: key.example,
                c: key.class,
                ppl,
                sid: key.scorer_id.clone(),
                th: key.template_hash.clone(),
            };
            let mut buf = serde_json::to_vec(&line)?;
            buf.push(b'\n');
            let path = self.path.as_deref().expect("file-backed cache has a path");
            f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}
