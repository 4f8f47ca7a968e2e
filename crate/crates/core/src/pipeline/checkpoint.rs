use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{atomic_write, parse_jsonl, write_jsonl, DatasetHandle, SourceFile};
use crate::model::{sha256_hex, ImageId};

/// On-disk progress marker. The full dataset state lives in a JSONL file
/// next to it; `state_sha256` ties the two together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineCheckpoint {
    pub config_hash: String,
    pub dataset: String,
    /// Image ids processed per stage (completed or failed there).
    pub completed: BTreeMap<u8, BTreeSet<ImageId>>,
    pub state_file: String,
    pub state_sha256: String,
    pub sources: Vec<SourceFile>,
}

impl PipelineCheckpoint {
    pub fn from_handle(config_hash: &str, handle: &DatasetHandle, state_file: &Path, state_sha256: String) -> Self {
        let mut completed: BTreeMap<u8, BTreeSet<ImageId>> = (1..=3).map(|k| (k, BTreeSet::new())).collect();
        for rec in &handle.images {
            for k in 1..=3u8 {
                let failed_here = rec.provenance.failure.as_ref().is_some_and(|f| f.stage <= k);
                if rec.provenance.completed(k) || failed_here {
                    completed.get_mut(&k).expect("stage key").insert(rec.image_id);
                }
            }
        }
        Self {
            config_hash: config_hash.to_string(),
            dataset: handle.name.clone(),
            completed,
            state_file: state_file.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            state_sha256,
            sources: handle.source_manifest.clone(),
        }
    }

    /// True when every image has passed (or failed) stage `k`.
    pub fn stage_done(&self, k: u8, n_images: usize) -> bool {
        self.completed.get(&k).is_some_and(|s| s.len() == n_images)
    }
}

/// Saves checkpoints and refuses to move backwards.
#[derive(Debug)]
pub struct Checkpointer {
    checkpoint_path: PathBuf,
    state_path: PathBuf,
    config_hash: String,
    last: Option<PipelineCheckpoint>,
    saves: usize,
}

impl Checkpointer {
    pub fn new(checkpoint_path: PathBuf, state_path: PathBuf, config_hash: String) -> Self {
        Self {
            checkpoint_path,
            state_path,
            config_hash,
            last: None,
            saves: 0,
        }
    }

    pub fn saves(&self) -> usize {
        self.saves
    }

    pub fn save(&mut self, handle: &DatasetHandle) -> Result<()> {
        let (_, sha) = write_jsonl(&handle.images, &self.state_path)?;
        let cp = PipelineCheckpoint::from_handle(&self.config_hash, handle, &self.state_path, sha);
        if let Some(prev) = &self.last {
            for (k, ids) in &prev.completed {
                if !ids.is_subset(&cp.completed[k]) {
                    return Err(Error::StageViolation(format!("stage {k} completion set shrank")));
                }
            }
        }
        let mut bytes = serde_json::to_vec_pretty(&cp).expect("checkpoint serializes");
        bytes.push(b'\n');
        atomic_write(&self.checkpoint_path, &bytes)?;
        self.last = Some(cp);
        self.saves += 1;
        Ok(())
    }

    /// Load the checkpoint and its state. `Ok(None)` when none exists.
    pub fn load(&mut self) -> Result<Option<(PipelineCheckpoint, DatasetHandle)>> {
        let bytes = match fs::read(&self.checkpoint_path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&self.checkpoint_path, e)),
        };
        let cp: PipelineCheckpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::schema(self.checkpoint_path.display().to_string(), e.to_string()))?;
        if cp.config_hash != self.config_hash {
            return Err(Error::CheckpointMismatch {
                expected: self.config_hash.clone(),
                found: cp.config_hash,
            });
        }
        let state = fs::read(&self.state_path).map_err(|e| Error::io(&self.state_path, e))?;
        let found = sha256_hex(&state);
        if found != cp.state_sha256 {
            return Err(Error::schema(
                self.state_path.display().to_string(),
                format!("state digest {found} does not match checkpoint {}", cp.state_sha256),
            ));
        }
        let text = String::from_utf8(state).map_err(|e| Error::schema(self.state_path.display().to_string(), e.to_string()))?;
        let images = parse_jsonl(&text)?;
        let handle = DatasetHandle {
            name: cp.dataset.clone(),
            images,
            source_manifest: cp.sources.clone(),
        };
        self.last = Some(cp.clone());
        Ok(Some((cp, handle)))
    }
}
