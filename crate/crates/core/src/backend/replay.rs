use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse};

/// Stable content key: everything in the request except the run id, so the
/// same conversation replays under another run name.
pub fn cache_key(request: &ChatRequest) -> String {
    let tag = &request.tag;
    // serde_json objects are key-sorted, which makes this canonical
    let canonical = serde_json::json!({
        "system_text": request.system_text,
        "messages": request.messages,
        "params": request.params,
        "tag": {
            "round": tag.round,
            "stage": tag.stage,
            "actor": tag.actor,
            "action_kind": tag.action_kind,
            "attempt": tag.attempt,
        },
    });
    let bytes = serde_json::to_vec(&canonical).expect("request serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// One cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub backend: String,
    pub request: ChatRequest,
    pub response: ChatResponse,
}

pub enum ReplayMode {
    /// A miss is fatal.
    Strict,
    /// A miss is forwarded to the inner backend and stored.
    Record(Arc<dyn ChatBackend>),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReplayStats {
    pub hits: u64,
    pub misses: u64,
    pub inner_calls: u64,
}

/// Content-addressed response cache over a directory of `<key>.json` files.
pub struct ReplayBackend {
    id: String,
    dir: PathBuf,
    mode: ReplayMode,
    write_lock: Mutex<()>,
    hits: AtomicU64,
    misses: AtomicU64,
    inner_calls: AtomicU64,
}

impl ReplayBackend {
    pub fn open(dir: &Path, mode: ReplayMode) -> Result<Self, BackendError> {
        match &mode {
            ReplayMode::Strict => {
                if !dir.is_dir() {
                    return Err(BackendError::Io(format!(
                        "replay cache {} does not exist",
                        dir.display()
                    )));
                }
            }
            ReplayMode::Record(_) => {
                fs::create_dir_all(dir).map_err(|e| BackendError::Io(format!("{}: {e}", dir.display())))?;
            }
        }
        let id = match &mode {
            ReplayMode::Strict => format!("replay:{}", dir.display()),
            ReplayMode::Record(inner) => inner.id().to_string(),
        };
        Ok(Self {
            id,
            dir: dir.to_path_buf(),
            mode,
            write_lock: Mutex::new(()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            inner_calls: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn stats(&self) -> ReplayStats {
        ReplayStats {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
            inner_calls: self.inner_calls.load(Ordering::SeqCst),
        }
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn lookup(&self, key: &str) -> Result<Option<CacheEntry>, BackendError> {
        let path = self.path_for(key);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| BackendError::Io(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(BackendError::Io(format!("{}: {e}", path.display()))),
        }
    }

    fn store(&self, entry: &CacheEntry) -> Result<(), BackendError> {
        let _guard = self.write_lock.lock().expect("cache write lock");
        let path = self.path_for(&entry.key);
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(entry).expect("cache entry serializes");
        fs::write(&tmp, text)
            .and_then(|_| fs::rename(&tmp, &path))
            .map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))
    }
}

impl ChatBackend for ReplayBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let key = cache_key(request);
        if let Some(entry) = self.lookup(&key)? {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(entry.response);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        match &self.mode {
            ReplayMode::Strict => Err(BackendError::ReplayMiss { key }),
            ReplayMode::Record(inner) => {
                self.inner_calls.fetch_add(1, Ordering::SeqCst);
                let response = inner.complete(request)?;
                self.store(&CacheEntry {
                    key,
                    backend: inner.id().to_string(),
                    request: request.clone(),
                    response: response.clone(),
                })?;
                Ok(response)
            }
        }
    }
}
