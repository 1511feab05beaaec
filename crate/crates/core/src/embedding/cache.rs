use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Embedded, EmbeddingError, EmbeddingVector};
use crate::util::{atomic_write, path_safe, KeyLocks};

const MAGIC: &[u8; 4] = b"SPV1";

/// Provenance stored next to each cached vector file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub provider_id: String,
    pub key: String,
    pub source_kind: String,
    pub source_hash: String,
    pub pooling: String,
    #[serde(default)]
    pub pooled_normalized: bool,
    #[serde(default)]
    pub dim: usize,
    #[serde(default)]
    pub tokens: usize,
    pub created_at: String,
}

impl CacheMeta {
    pub fn new(
        provider_id: &str,
        key: &str,
        source_kind: &str,
        source_hash: &str,
        pooling: &str,
    ) -> Self {
        Self {
            provider_id: provider_id.to_string(),
            key: key.to_string(),
            source_kind: source_kind.to_string(),
            source_hash: source_hash.to_string(),
            pooling: pooling.to_string(),
            pooled_normalized: false,
            dim: 0,
            tokens: 0,
            created_at: chrono::Utc::now().to_rfc3339(),
        }
    }
}

/// `<root>/emb/<provider_id>/<key>.vec` plus `<key>.meta`. A disabled
/// cache computes every request.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    root: Option<PathBuf>,
    locks: KeyLocks,
}

impl EmbeddingCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: Some(root.into()),
            locks: KeyLocks::default(),
        }
    }

    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn vec_path(&self, provider_id: &str, key: &str) -> Option<PathBuf> {
        self.root.as_ref().map(|r| {
            r.join("emb")
                .join(path_safe(provider_id))
                .join(format!("{key}.vec"))
        })
    }

    pub(super) fn get_or_compute(
        &self,
        provider_id: &str,
        key: &str,
        compute: impl FnOnce() -> Result<(Embedded, CacheMeta), EmbeddingError>,
    ) -> Result<Embedded, EmbeddingError> {
        let Some(path) = self.vec_path(provider_id, key) else {
            return compute().map(|(e, _)| e);
        };
        let _guard = self.locks.lock(key);
        if path.exists() {
            return load(&path, provider_id);
        }
        let ((pooled, tokens), mut meta) = compute()?;
        meta.pooled_normalized = pooled.is_normalized();
        meta.dim = pooled.dim();
        meta.tokens = tokens.len();
        atomic_write(
            &path.with_extension("meta"),
            &serde_json::to_vec_pretty(&meta).map_err(io)?,
        )?;
        atomic_write(&path, &encode(&pooled, &tokens))?;
        Ok((pooled, tokens))
    }
}

fn io(e: serde_json::Error) -> EmbeddingError {
    EmbeddingError::Cache(e.to_string())
}

fn encode(pooled: &EmbeddingVector, tokens: &[EmbeddingVector]) -> Vec<u8> {
    let dim = pooled.dim();
    let mut buf = Vec::with_capacity(12 + 4 * dim * (tokens.len() + 1));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(tokens.len() as u32).to_le_bytes());
    for v in std::iter::once(pooled).chain(tokens) {
        for x in v.values() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

fn load(path: &Path, provider_id: &str) -> Result<Embedded, EmbeddingError> {
    let bytes = fs::read(path)?;
    let bad = |m: &str| EmbeddingError::Cache(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("bad header"));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() != 12 + 4 * dim * (count + 1) {
        return Err(bad("truncated"));
    }
    let meta: CacheMeta =
        serde_json::from_slice(&fs::read(path.with_extension("meta"))?).map_err(io)?;
    let floats: Vec<f32> = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut chunks = floats.chunks_exact(dim);
    let pooled = EmbeddingVector::new(
        chunks.next().unwrap().to_vec(),
        provider_id,
        meta.pooled_normalized,
    )?;
    let tokens = chunks
        .map(|c| EmbeddingVector::new(c.to_vec(), provider_id, false))
        .collect::<Result<_, _>>()?;
    Ok((pooled, tokens))
}
