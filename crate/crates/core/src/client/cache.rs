use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::image::write_atomic;

/// SHA-256 over the model id, prompt version and serialized request.
/// Each component is length-prefixed so field boundaries cannot shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey([u8; 32]);

impl CacheKey {
    pub fn compute(model_id: &str, prompt_version: &str, request_body: &[u8]) -> Self {
        let mut hasher = Sha256::new();
        for part in [model_id.as_bytes(), prompt_version.as_bytes(), request_body] {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part);
        }
        let mut out = [0u8; 32];
        out.copy_from_slice(&hasher.finalize());
        CacheKey(out)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.hex())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    request_digest: String,
    stored_at: DateTime<Utc>,
    response_body: String,
}

/// One JSON file per key at `{dir}/{first two hex chars}/{digest}.json`.
#[derive(Debug, Clone)]
pub struct DiskCache {
    dir: PathBuf,
}

impl DiskCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        let hex = key.hex();
        self.dir.join(&hex[..2]).join(format!("{hex}.json"))
    }

    /// Stored response body, if any. Unreadable or corrupt entries count as
    /// misses.
    pub fn lookup(&self, key: &CacheKey) -> Option<Vec<u8>> {
        let path = self.path_for(key);
        let raw = match fs::read(&path) {
            Ok(raw) => raw,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return None,
            Err(e) => {
                log::warn!("cache entry {} unreadable: {e}", path.display());
                return None;
            }
        };
        match serde_json::from_slice::<CacheEntry>(&raw) {
            Ok(entry) if entry.request_digest == key.hex() => Some(entry.response_body.into_bytes()),
            Ok(_) => {
                log::warn!("cache entry {} has a mismatched digest; ignoring", path.display());
                None
            }
            Err(e) => {
                log::warn!("cache entry {} is corrupt ({e}); ignoring", path.display());
                None
            }
        }
    }

    /// Atomically write (or overwrite) an entry.
    pub fn store(&self, key: &CacheKey, response_body: &[u8]) -> io::Result<()> {
        let body = std::str::from_utf8(response_body)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("response body is not UTF-8: {e}")))?;
        let entry = CacheEntry { request_digest: key.hex(), stored_at: Utc::now(), response_body: body.to_string() };
        let bytes = serde_json::to_vec_pretty(&entry).map_err(io::Error::other)?;
        write_atomic(&self.path_for(key), &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dir_misses() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::new(dir.path());
        assert_eq!(cache.lookup(&CacheKey::compute("m", "v1", b"{}")), None);
    }

    #[test]
    fn store_then_lookup_returns_exact_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::new(dir.path());
        let key = CacheKey::compute("m", "v1", b"{\"a\":1}");
        let body = "{\"choices\":[{\"message\":{\"content\":\"\\u00e9 x\"}}]}\n";
        cache.store(&key, body.as_bytes()).unwrap();
        assert_eq!(cache.lookup(&key).unwrap(), body.as_bytes());
        let hex = key.hex();
        assert!(dir.path().join(&hex[..2]).join(format!("{hex}.json")).is_file());

        cache.store(&key, b"second").unwrap();
        assert_eq!(cache.lookup(&key).unwrap(), b"second");
    }

    #[test]
    fn truncated_entry_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = DiskCache::new(dir.path());
        let key = CacheKey::compute("m", "v1", b"body");
        cache.store(&key, b"payload").unwrap();
        let path = cache.path_for(&key);
        let full = fs::read(&path).unwrap();
        fs::write(&path, &full[..full.len() / 2]).unwrap();
        assert_eq!(cache.lookup(&key), None);
    }

    #[test]
    fn key_depends_on_every_component() {
        let base = CacheKey::compute("m", "v1", b"body");
        assert_eq!(base, CacheKey::compute("m", "v1", b"body"));
        assert_ne!(base, CacheKey::compute("m2", "v1", b"body"));
        assert_ne!(base, CacheKey::compute("m", "v2", b"body"));
        assert_ne!(base, CacheKey::compute("m", "v1", b"bodY"));
        // boundaries are length-prefixed
        assert_ne!(CacheKey::compute("ab", "c", b""), CacheKey::compute("a", "bc", b""));
    }
}
