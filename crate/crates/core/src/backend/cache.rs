use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{cache_key, Backend, BackendError, CacheRequest, GenerationRequest, ScoringRequest, TokenScores};
use crate::canonical::to_canonical_pretty;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CacheMode {
    /// Always call the backend and persist the response.
    Record,
    /// Serve hits from disk; misses go live and are recorded.
    Replay,
    /// Serve hits from disk; a miss is an error.
    StrictReplay,
    /// No cache.
    #[default]
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CachedResponse {
    Text { text: String },
    Scores(TokenScores),
}

/// One file per cache key: `{request, response, timestamp, backend}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub request: CacheRequest,
    pub response: CachedResponse,
    pub timestamp: u64,
    pub backend: String,
}

/// Directory of cached responses, sharded by the first two hex digits of the key.
/// Reads are lock-free; writes are serialized and atomic (temp file + rename).
pub struct ReplayCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl ReplayCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayCache {
            dir: dir.into(),
            write_lock: Mutex::new(()),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    fn io_err(path: &Path, e: impl std::fmt::Display) -> BackendError {
        BackendError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheEntry>, BackendError> {
        let path = self.path_for(key);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| Self::io_err(&path, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Self::io_err(&path, e)),
        }
    }

    pub fn put(&self, key: &str, entry: &CacheEntry) -> Result<(), BackendError> {
        let path = self.path_for(key);
        let body = to_canonical_pretty(entry).map_err(|e| Self::io_err(&path, e))?;
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        let parent = path.parent().expect("sharded path has a parent");
        fs::create_dir_all(parent).map_err(|e| Self::io_err(parent, e))?;
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, body).map_err(|e| Self::io_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Self::io_err(&path, e))
    }
}

/// Wraps a live backend (or none, for pure replay) with a [`ReplayCache`].
pub struct CachedBackend {
    id: String,
    inner: Option<Arc<dyn Backend>>,
    cache: Option<ReplayCache>,
    mode: CacheMode,
    live_calls: AtomicU64,
}

impl CachedBackend {
    pub fn new(inner: Option<Arc<dyn Backend>>, cache: Option<ReplayCache>, mode: CacheMode) -> Self {
        let id = inner
            .as_ref()
            .map(|b| b.id().to_string())
            .unwrap_or_else(|| "replay".to_string());
        CachedBackend {
            id,
            inner,
            cache,
            mode,
            live_calls: AtomicU64::new(0),
        }
    }

    /// Number of requests forwarded to the live backend.
    pub fn live_calls(&self) -> u64 {
        self.live_calls.load(Ordering::Relaxed)
    }

    fn live(&self) -> Result<&Arc<dyn Backend>, BackendError> {
        self.inner.as_ref().ok_or_else(|| BackendError::Unavailable {
            attempts: 0,
            message: "no live backend configured".into(),
        })
    }

    fn lookup(&self, key: &str) -> Result<Option<CachedResponse>, BackendError> {
        match (&self.cache, self.mode) {
            (Some(cache), CacheMode::Replay | CacheMode::StrictReplay) => {
                Ok(cache.get(key)?.map(|e| e.response))
            }
            _ => Ok(None),
        }
    }

    fn resolve(
        &self,
        request: CacheRequest,
        call: impl FnOnce(&dyn Backend) -> Result<CachedResponse, BackendError>,
    ) -> Result<CachedResponse, BackendError> {
        let key = cache_key(&request);
        if let Some(hit) = self.lookup(&key)? {
            return Ok(hit);
        }
        if self.mode == CacheMode::StrictReplay {
            return Err(BackendError::CacheMiss { key });
        }
        let live = self.live()?;
        self.live_calls.fetch_add(1, Ordering::Relaxed);
        let response = call(live.as_ref())?;
        if let (Some(cache), CacheMode::Record | CacheMode::Replay) = (&self.cache, self.mode) {
            let timestamp = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let entry = CacheEntry {
                request,
                response: response.clone(),
                timestamp,
                backend: live.id().to_string(),
            };
            cache.put(&key, &entry)?;
        }
        Ok(response)
    }
}

impl Backend for CachedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let resolved = self.resolve(CacheRequest::Generate(request.clone()), |b| {
            b.generate(request).map(|text| CachedResponse::Text { text })
        })?;
        match resolved {
            CachedResponse::Text { text } => Ok(text),
            CachedResponse::Scores(_) => Err(BackendError::MalformedResponse(
                "cached entry holds scores, expected text".into(),
            )),
        }
    }

    fn score_sequence(&self, model: &str, text: &str) -> Result<TokenScores, BackendError> {
        if text.is_empty() {
            return Err(BackendError::InvalidRequest("empty text".into()));
        }
        let request = CacheRequest::Score(ScoringRequest {
            model: model.to_string(),
            text: text.to_string(),
        });
        let resolved = self.resolve(request, |b| b.score_sequence(model, text).map(CachedResponse::Scores))?;
        match resolved {
            CachedResponse::Scores(s) => Ok(s),
            CachedResponse::Text { .. } => Err(BackendError::MalformedResponse(
                "cached entry holds text, expected scores".into(),
            )),
        }
    }
}
