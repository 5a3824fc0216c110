//! Content-addressed response cache.
//!
//! Each entry is keyed by `sha256(scene_id, provider_id, prompt_sha256)` and
//! stored on disk as `<dir>/<first two hex chars>/<key>.json`. Files are
//! written to a temporary name and renamed into place, so readers never see a
//! partial entry. Writes from one process are serialized.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache I/O at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("corrupt cache entry {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub scene_id: String,
    pub provider_id: String,
    pub prompt_sha256: String,
    pub text: String,
}

pub fn sha256_hex(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

/// Cache key for one response. Fields are length-prefixed so no two
/// distinct triples share an encoding.
pub fn cache_key(scene_id: &str, provider_id: &str, prompt: &str) -> String {
    let mut h = Sha256::new();
    for part in [scene_id, provider_id, &sha256_hex(prompt)] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug)]
enum Store {
    Memory(RwLock<HashMap<String, CacheEntry>>),
    Disk { dir: PathBuf, write_lock: Mutex<()> },
}

#[derive(Debug)]
pub struct ResponseCache {
    store: Store,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self { store: Store::Memory(RwLock::new(HashMap::new())) }
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self, CacheError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|source| CacheError::Io { path: dir.clone(), source })?;
        Ok(Self { store: Store::Disk { dir, write_lock: Mutex::new(()) } })
    }

    pub fn entry_path(dir: &Path, key: &str) -> PathBuf {
        dir.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn get(&self, scene_id: &str, provider_id: &str, prompt: &str) -> Result<Option<CacheEntry>, CacheError> {
        let key = cache_key(scene_id, provider_id, prompt);
        match &self.store {
            Store::Memory(map) => Ok(map.read().unwrap_or_else(|e| e.into_inner()).get(&key).cloned()),
            Store::Disk { dir, .. } => {
                let path = Self::entry_path(dir, &key);
                let bytes = match std::fs::read(&path) {
                    Ok(b) => b,
                    Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
                    Err(source) => return Err(CacheError::Io { path, source }),
                };
                let entry: CacheEntry = serde_json::from_slice(&bytes)
                    .map_err(|e| CacheError::Corrupt { path: path.clone(), message: e.to_string() })?;
                if entry.key != key {
                    return Err(CacheError::Corrupt { path, message: format!("stored key {}", entry.key) });
                }
                Ok(Some(entry))
            }
        }
    }

    pub fn put(&self, scene_id: &str, provider_id: &str, prompt: &str, text: &str) -> Result<CacheEntry, CacheError> {
        let entry = CacheEntry {
            key: cache_key(scene_id, provider_id, prompt),
            scene_id: scene_id.into(),
            provider_id: provider_id.into(),
            prompt_sha256: sha256_hex(prompt),
            text: text.into(),
        };
        match &self.store {
            Store::Memory(map) => {
                map.write().unwrap_or_else(|e| e.into_inner()).insert(entry.key.clone(), entry.clone());
            }
            Store::Disk { dir, write_lock } => {
                let _guard = write_lock.lock().unwrap_or_else(|e| e.into_inner());
                let path = Self::entry_path(dir, &entry.key);
                let parent = path.parent().expect("entry path has a parent");
                let io = |path: &Path| {
                    let path = path.to_path_buf();
                    move |source| CacheError::Io { path, source }
                };
                std::fs::create_dir_all(parent).map_err(io(parent))?;
                let tmp = parent.join(format!(".{}.{}.tmp", entry.key, std::process::id()));
                let body = serde_json::to_vec_pretty(&entry).expect("cache entry serializes");
                let mut f = std::fs::File::create(&tmp).map_err(io(&tmp))?;
                f.write_all(&body).and_then(|_| f.sync_all()).map_err(io(&tmp))?;
                std::fs::rename(&tmp, &path).map_err(io(&path))?;
            }
        }
        Ok(entry)
    }
}
