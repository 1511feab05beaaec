//! Image store and append-only ledger.

use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use super::{GeneratedImageRecord, GenerationError};
use crate::util::{append_jsonl, atomic_write, read_jsonl, sha256_hex, KeyLocks};

/// `<root>/images/<first2>/<key>.bin` plus `<key>.meta` holding the
/// record. Entries are written once; a hash mismatch is treated as a miss.
#[derive(Debug)]
pub struct ImageCache {
    root: PathBuf,
    locks: KeyLocks,
}

impl ImageCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            locks: KeyLocks::default(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn relative_bin(&self, key: &str) -> String {
        format!("images/{}/{key}.bin", &key[..2.min(key.len())])
    }

    fn meta_path(&self, key: &str) -> PathBuf {
        self.root
            .join(format!("images/{}/{key}.meta", &key[..2.min(key.len())]))
    }

    pub fn bin_path(&self, key: &str) -> PathBuf {
        self.root.join(self.relative_bin(key))
    }

    pub fn lock(&self, key: &str) -> MutexGuard<'_, ()> {
        self.locks.lock(key)
    }

    pub fn get(&self, key: &str) -> Result<Option<GeneratedImageRecord>, GenerationError> {
        let meta = match std::fs::read(self.meta_path(key)) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let record: GeneratedImageRecord = match serde_json::from_slice(&meta) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("unreadable image record {key}: {e}");
                return Ok(None);
            }
        };
        match std::fs::read(self.bin_path(key)) {
            Ok(bytes) if sha256_hex(&bytes) == record.content_hash => Ok(Some(record)),
            Ok(_) => {
                log::warn!("image {key} does not match its recorded hash; regenerating");
                Ok(None)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn read_bytes(&self, record: &GeneratedImageRecord) -> Result<Vec<u8>, GenerationError> {
        Ok(std::fs::read(self.root.join(&record.image_ref))?)
    }

    /// Bytes first, then the record, so a visible record always has its
    /// image.
    pub fn put(
        &self,
        key: &str,
        bytes: &[u8],
        record: &GeneratedImageRecord,
    ) -> Result<(), GenerationError> {
        if sha256_hex(bytes) != record.content_hash {
            return Err(GenerationError::Cache(format!(
                "record for {key} does not match its bytes"
            )));
        }
        atomic_write(&self.bin_path(key), bytes)?;
        let meta = serde_json::to_vec(record).map_err(|e| GenerationError::Cache(e.to_string()))?;
        atomic_write(&self.meta_path(key), &meta)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub prompt_key: String,
    pub backend_id: String,
    pub steps: u32,
    pub latency_s: f64,
    pub cost_usd: f64,
    pub content_hash: String,
    pub timestamp: String,
}

impl From<&GeneratedImageRecord> for LedgerEntry {
    fn from(r: &GeneratedImageRecord) -> Self {
        Self {
            prompt_key: r.prompt_key.clone(),
            backend_id: r.backend_id.clone(),
            steps: r.steps,
            latency_s: r.latency_s,
            cost_usd: r.cost_usd,
            content_hash: r.content_hash.clone(),
            timestamp: r.created_at.clone(),
        }
    }
}

/// Append-only JSONL log, one entry per backend call.
#[derive(Debug)]
pub struct Ledger {
    path: PathBuf,
    guard: Mutex<()>,
}

impl Ledger {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            guard: Mutex::new(()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, entry: &LedgerEntry) -> Result<(), GenerationError> {
        let _g = self.guard.lock().unwrap();
        append_jsonl(&self.path, entry)?;
        Ok(())
    }

    pub fn entries(&self) -> Result<Vec<LedgerEntry>, GenerationError> {
        if !self.path.exists() {
            return Ok(vec![]);
        }
        Ok(read_jsonl(&self.path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::tests::prompt;
    use crate::generation::{generate_image, preset_params, CostModel, StubBackend};

    #[test]
    fn hit_skips_backend_and_tamper_forces_regeneration() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ImageCache::new(dir.path().join("cache"));
        let ledger = Ledger::new(dir.path().join("ledger.jsonl"));
        let stub = StubBackend::new();
        let costs = CostModel::published();
        let params = preset_params("sdxl").unwrap();
        let a = generate_image(
            &prompt("a cat"),
            &params,
            &stub,
            &cache,
            Some(&ledger),
            &costs,
        )
        .unwrap();
        let b = generate_image(
            &prompt("a cat"),
            &params,
            &stub,
            &cache,
            Some(&ledger),
            &costs,
        )
        .unwrap();
        assert_eq!(stub.calls(), 1);
        assert_eq!(a, b);
        assert_eq!(a.cost_usd, 0.022);
        assert_eq!(ledger.entries().unwrap().len(), 1);
        assert!(a
            .image_ref
            .starts_with(&format!("images/{}/", &a.prompt_key[..2])));

        std::fs::write(cache.bin_path(&a.prompt_key), b"tampered").unwrap();
        let c = generate_image(
            &prompt("a cat"),
            &params,
            &stub,
            &cache,
            Some(&ledger),
            &costs,
        )
        .unwrap();
        assert_eq!(stub.calls(), 2);
        assert_eq!(c.content_hash, a.content_hash);
    }

    #[test]
    fn put_rejects_mismatched_record() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ImageCache::new(dir.path());
        let record = GeneratedImageRecord {
            content_hash: "00".into(),
            prompt_key: "abcd".into(),
            image_ref: cache.relative_bin("abcd"),
            latency_s: 0.0,
            cost_usd: 0.0,
            created_at: String::new(),
            backend_id: "x".into(),
            steps: 1,
        };
        assert!(cache.put("abcd", b"bytes", &record).is_err());
    }
}
