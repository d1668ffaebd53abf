//! Content-addressed response cache.
//!
//! Layout: `<root>/<first two hex digits>/<digest>.entry`. Each entry is a
//! one-line header `bloomqa-cache v1 <payload sha256> <created_at_ms>`
//! followed by the payload bytes. Writes go to a temporary file in the same
//! directory and are renamed into place, so readers never see a partial
//! entry.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::lm_backend::{Backend, BackendError, GenParams, ScoreValue};

const HEADER_TAG: &str = "bloomqa-cache v1";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(String);

impl CacheKey {
    /// Digest of the canonical JSON encoding of `parts`.
    pub fn of<T: Serialize>(parts: &T) -> Self {
        let bytes = serde_json::to_vec(parts).expect("cache key serializes");
        Self(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Outcome of a cache read.
#[derive(Debug, PartialEq, Eq)]
pub enum CacheLookup {
    Hit(Vec<u8>),
    Miss,
    /// The entry exists but its payload does not match its digest.
    Corrupt,
}

#[derive(Debug, Clone)]
pub struct DiskCache {
    root: PathBuf,
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl DiskCache {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_path(&self, key: &CacheKey) -> PathBuf {
        self.root
            .join(&key.0[..2])
            .join(format!("{}.entry", key.0))
    }

    pub fn lookup(&self, key: &CacheKey) -> CacheLookup {
        let bytes = match fs::read(self.entry_path(key)) {
            Ok(bytes) => bytes,
            Err(_) => return CacheLookup::Miss,
        };
        let Some(newline) = bytes.iter().position(|&b| b == b'\n') else {
            return CacheLookup::Corrupt;
        };
        let header = String::from_utf8_lossy(&bytes[..newline]);
        let payload = &bytes[newline + 1..];
        let Some(rest) = header.strip_prefix(HEADER_TAG) else {
            return CacheLookup::Corrupt;
        };
        let expected = rest.split_whitespace().next().unwrap_or_default();
        if hex::encode(Sha256::digest(payload)) != expected {
            return CacheLookup::Corrupt;
        }
        CacheLookup::Hit(payload.to_vec())
    }

    /// Payload for `key`; corrupt entries are reported and treated as misses.
    pub fn get(&self, key: &CacheKey) -> Option<Vec<u8>> {
        match self.lookup(key) {
            CacheLookup::Hit(payload) => Some(payload),
            CacheLookup::Miss => None,
            CacheLookup::Corrupt => {
                tracing::warn!(
                    "cache entry {} is corrupt; regenerating",
                    self.entry_path(key).display()
                );
                None
            }
        }
    }

    pub fn put(&self, key: &CacheKey, payload: &[u8]) -> io::Result<()> {
        let path = self.entry_path(key);
        let dir = path.parent().expect("entry has a parent");
        fs::create_dir_all(dir)?;
        let created_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or_default();
        let temp = dir.join(format!(
            ".{}.{}.{}.tmp",
            key.0,
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut file = fs::File::create(&temp)?;
            writeln!(
                file,
                "{HEADER_TAG} {} {created_at}",
                hex::encode(Sha256::digest(payload))
            )?;
            file.write_all(payload)?;
            file.flush()?;
        }
        fs::rename(&temp, &path).inspect_err(|_| {
            let _ = fs::remove_file(&temp);
        })
    }

    fn get_json<T: DeserializeOwned>(&self, key: &CacheKey) -> Option<T> {
        let payload = self.get(key)?;
        match serde_json::from_slice(&payload) {
            Ok(value) => Some(value),
            Err(err) => {
                tracing::warn!("cache entry {} does not decode: {err}", key.0);
                None
            }
        }
    }

    fn put_json<T: Serialize>(&self, key: &CacheKey, value: &T) {
        let payload = serde_json::to_vec(value).expect("cached value serializes");
        if let Err(err) = self.put(key, &payload) {
            tracing::warn!("cannot write cache entry {}: {err}", key.0);
        }
    }
}

#[derive(Serialize)]
struct RequestKey<'a> {
    backend: &'a str,
    kind: &'static str,
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    continuation: Option<&'a str>,
    params: Option<&'a GenParams>,
    seed: Option<u64>,
    /// All samples of a generation request are stored together.
    sample_index: Option<usize>,
}

/// Serves requests from a [`DiskCache`], forwarding misses to `inner`.
pub struct CachedBackend<B> {
    inner: B,
    cache: DiskCache,
    backend_id: String,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl<B: Backend> CachedBackend<B> {
    pub fn new(inner: B, cache: DiskCache) -> Self {
        Self {
            backend_id: inner.id(),
            inner,
            cache,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    fn through<T, F>(&self, key: RequestKey<'_>, compute: F) -> Result<T, BackendError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T, BackendError>,
    {
        let key = CacheKey::of(&key);
        if let Some(value) = self.cache.get_json(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(value);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let value = compute()?;
        self.cache.put_json(&key, &value);
        Ok(value)
    }
}

impl<B: Backend> Backend for CachedBackend<B> {
    fn id(&self) -> String {
        self.backend_id.clone()
    }

    fn generate(&self, prompt: &str, params: &GenParams) -> Result<Vec<String>, BackendError> {
        let key = RequestKey {
            backend: &self.backend_id,
            kind: "generate",
            prompt,
            continuation: None,
            params: Some(params),
            seed: Some(params.seed),
            sample_index: None,
        };
        self.through(key, || self.inner.generate(prompt, params))
    }

    fn score(&self, text: &str) -> Result<ScoreValue, BackendError> {
        if text.trim().is_empty() {
            return Ok(ScoreValue::empty());
        }
        let key = RequestKey {
            backend: &self.backend_id,
            kind: "score",
            prompt: text,
            continuation: None,
            params: None,
            seed: None,
            sample_index: None,
        };
        self.through(key, || self.inner.score(text))
    }

    fn score_continuation(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<ScoreValue, BackendError> {
        let key = RequestKey {
            backend: &self.backend_id,
            kind: "score_continuation",
            prompt: context,
            continuation: Some(continuation),
            params: None,
            seed: None,
            sample_index: None,
        };
        self.through(key, || self.inner.score_continuation(context, continuation))
    }
}
