use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{BackendError, CompletionRequest, CompletionResult, LlmBackend};
use crate::hashing::digest_parts;

/// On-disk response cache keyed by (backend id, prompt, seed).
///
/// One JSON file per key. Writes go through a temp file and a rename, so
/// concurrent writers of the same key leave one complete file behind.
pub struct CachedBackend {
    inner: Arc<dyn LlmBackend>,
    dir: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl CachedBackend {
    pub fn new(inner: Arc<dyn LlmBackend>, dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| BackendError::Cache(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            inner,
            dir,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, request: &CompletionRequest) -> PathBuf {
        let key = digest_parts(&[
            self.inner.id().as_bytes(),
            request.prompt.as_bytes(),
            &request.seed.to_le_bytes(),
        ]);
        self.dir.join(format!("{key}.json"))
    }
}

impl LlmBackend for CachedBackend {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, BackendError> {
        request.check()?;
        let path = self.path_for(request);
        if let Ok(text) = fs::read_to_string(&path) {
            match serde_json::from_str::<CompletionResult>(&text) {
                Ok(hit) => {
                    self.hits.fetch_add(1, Ordering::Relaxed);
                    return Ok(hit);
                }
                Err(e) => log::warn!("ignoring corrupt cache entry {}: {e}", path.display()),
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let result = self.inner.complete(request)?;
        let json = serde_json::to_string(&result).map_err(|e| BackendError::Cache(e.to_string()))?;
        write_atomic(&path, json.as_bytes())
            .map_err(|e| BackendError::Cache(format!("{}: {e}", path.display())))?;
        Ok(result)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = path.with_extension(format!("tmp.{}.{n}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}
