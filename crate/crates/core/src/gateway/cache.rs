//! Content-addressed response cache.
//!
//! Keys are SHA-256 over `endpoint_id`, the template version, and the exact
//! request bytes. Entries are inserted only after a response has been fully
//! received and parsed; on disk they are written to a temp file and renamed.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::atomic_write;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request_hash: String,
    pub response: String,
    pub timestamp: u64,
}

pub fn request_hash(endpoint_id: &str, template_version: &str, request: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(endpoint_id.as_bytes());
    h.update([0u8]);
    h.update(template_version.as_bytes());
    h.update([0u8]);
    h.update(request);
    hex::encode(h.finalize())
}

#[derive(Debug, Default)]
pub struct ResponseCache {
    mem: Mutex<HashMap<String, CacheEntry>>,
    dir: Option<PathBuf>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            mem: Mutex::new(HashMap::new()),
            dir: Some(dir),
        })
    }

    fn entry_path(dir: &Path, hash: &str) -> PathBuf {
        dir.join(&hash[..2]).join(format!("{hash}.json"))
    }

    pub fn get(&self, hash: &str) -> Option<CacheEntry> {
        if let Some(e) = self.mem.lock().unwrap().get(hash) {
            return Some(e.clone());
        }
        let dir = self.dir.as_ref()?;
        let bytes = fs::read(Self::entry_path(dir, hash)).ok()?;
        let entry: CacheEntry = serde_json::from_slice(&bytes).ok()?;
        if entry.request_hash != hash {
            return None;
        }
        self.mem.lock().unwrap().insert(hash.to_string(), entry.clone());
        Some(entry)
    }

    /// Inserts unless an entry already exists; returns the stored entry.
    pub fn put(&self, entry: CacheEntry) -> Result<CacheEntry> {
        let mut mem = self.mem.lock().unwrap();
        if let Some(existing) = mem.get(&entry.request_hash) {
            return Ok(existing.clone());
        }
        if let Some(dir) = &self.dir {
            let bytes = serde_json::to_vec(&entry).expect("cache entry serializes");
            atomic_write(&Self::entry_path(dir, &entry.request_hash), &bytes)?;
        }
        mem.insert(entry.request_hash.clone(), entry.clone());
        Ok(entry)
    }

    pub fn len(&self) -> usize {
        self.mem.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
