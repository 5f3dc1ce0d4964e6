//! Content-addressed on-disk cache for checkpoints and retraining results.
//!
//! Entries live at `<root>/<kind>/<key>.json`. The first line of a file is
//! the SHA-256 of the payload that follows it; loads re-hash the payload and
//! refuse to use an entry that does not match. Writes go to a temporary file
//! that is renamed into place while holding a process-wide lock.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{InfluenceError, Result, ResultExt};
use crate::fingerprint;

/// Environment variable naming the default cache directory.
pub const CACHE_DIR_ENV: &str = "INFLUENCE_CACHE_DIR";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    pub writes: usize,
}

#[derive(Debug)]
pub struct Cache {
    root: Option<PathBuf>,
    write_lock: Mutex<()>,
    stats: Mutex<BTreeMap<String, CacheStats>>,
}

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self::with_root(Some(root.into()))
    }

    /// A cache that stores nothing; every lookup misses.
    pub fn disabled() -> Self {
        Self::with_root(None)
    }

    fn with_root(root: Option<PathBuf>) -> Self {
        Cache {
            root,
            write_lock: Mutex::new(()),
            stats: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Totals over all kinds.
    pub fn stats(&self) -> CacheStats {
        let map = self.stats.lock().unwrap_or_else(|p| p.into_inner());
        map.values().fold(CacheStats::default(), |acc, s| CacheStats {
            hits: acc.hits + s.hits,
            misses: acc.misses + s.misses,
            writes: acc.writes + s.writes,
        })
    }

    pub fn stats_for(&self, kind: &str) -> CacheStats {
        let map = self.stats.lock().unwrap_or_else(|p| p.into_inner());
        map.get(kind).copied().unwrap_or_default()
    }

    fn bump(&self, kind: &str, f: impl FnOnce(&mut CacheStats)) {
        let mut map = self.stats.lock().unwrap_or_else(|p| p.into_inner());
        f(map.entry(kind.to_string()).or_default());
    }

    /// Hash of the canonical JSON form of `key`.
    pub fn key_of<K: Serialize>(key: &K) -> String {
        fingerprint::hash_json(key)
    }

    fn path(&self, kind: &str, key: &str) -> Option<PathBuf> {
        self.root
            .as_ref()
            .map(|r| r.join(kind).join(format!("{key}.json")))
    }

    pub fn load<T: DeserializeOwned>(&self, kind: &str, key: &str) -> Result<Option<T>> {
        let Some(path) = self.path(kind, key) else {
            self.bump(kind, |s| s.misses += 1);
            return Ok(None);
        };
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                self.bump(kind, |s| s.misses += 1);
                return Ok(None);
            }
            Err(e) => return Err(InfluenceError::io(&path, e)),
        };
        let (expected, payload) = text.split_once('\n').unwrap_or((text.as_str(), ""));
        let found = fingerprint::sha256_hex(payload.as_bytes());
        if found != expected {
            return Err(InfluenceError::CacheCorruption {
                path,
                expected: expected.to_string(),
                found,
            });
        }
        let value = serde_json::from_str(payload)
            .map_err(InfluenceError::from)
            .context(|| format!("decoding cache entry {}", path.display()))?;
        self.bump(kind, |s| s.hits += 1);
        Ok(Some(value))
    }

    pub fn store<T: Serialize>(&self, kind: &str, key: &str, value: &T) -> Result<()> {
        let Some(path) = self.path(kind, key) else {
            return Ok(());
        };
        let payload = serde_json::to_string(value)?;
        let body = format!("{}\n{}", fingerprint::sha256_hex(payload.as_bytes()), payload);
        let dir = path.parent().expect("cache entries live in a kind directory");
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        std::fs::create_dir_all(dir).map_err(|e| InfluenceError::io(dir, e))?;
        let tmp = dir.join(format!(".{key}.{}.tmp", std::process::id()));
        std::fs::write(&tmp, body).map_err(|e| InfluenceError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| InfluenceError::io(&path, e))?;
        self.bump(kind, |s| s.writes += 1);
        Ok(())
    }

    /// Loads `kind/key`, or computes, stores and returns it.
    /// The boolean is `true` when the value came from the cache.
    pub fn get_or_compute<T, F>(&self, kind: &str, key: &str, compute: F) -> Result<(T, bool)>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        if let Some(v) = self.load(kind, key)? {
            return Ok((v, true));
        }
        let v = compute()?;
        self.store(kind, key, &v)?;
        Ok((v, false))
    }
}
