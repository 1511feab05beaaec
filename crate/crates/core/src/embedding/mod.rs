//! Text and image encoder providers, the on-disk embedding cache, oracle
//! feature files and the CLIP-score consistency proxy.

mod cache;
mod hash;
mod http;
mod oracle;
mod types;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::util::sha256_hex;

pub use cache::{CacheMeta, EmbeddingCache};
pub use hash::{hash_projection, HashImageEncoder, HashTextEncoder};
pub use http::{HttpEncoder, HttpEncoderConfig, Modality};
pub use oracle::OracleFeatures;
pub use types::{EmbeddingVector, FeaturePack};

pub(crate) use types::l2_norm;

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("invalid embedding: {0}")]
    Invalid(String),
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("provider {provider} failed after {attempts} attempt(s): {message}")]
    Provider {
        provider: String,
        attempts: u32,
        message: String,
    },
    #[error("missing artifact {0}")]
    MissingArtifact(String),
    #[error("embedding cache: {0}")]
    Cache(String),
    #[error("oracle features: {0}")]
    Oracle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What a provider returns before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEmbedding {
    pub pooled: Vec<f32>,
    /// May be empty for providers that only return a pooled vector.
    #[serde(default)]
    pub tokens: Vec<Vec<f32>>,
}

pub trait TextEncoder: Send + Sync {
    fn provider_id(&self) -> &str;
    fn dim(&self) -> usize;
    /// Free-form description of how the provider pools tokens.
    fn pooling(&self) -> &str {
        "provider-defined"
    }
    fn encode_text(&self, text: &str) -> Result<RawEmbedding, EmbeddingError>;
}

pub trait ImageEncoder: Send + Sync {
    fn provider_id(&self) -> &str;
    fn dim(&self) -> usize;
    fn pooling(&self) -> &str {
        "provider-defined"
    }
    fn encode_image(&self, bytes: &[u8]) -> Result<RawEmbedding, EmbeddingError>;
}

impl<E: TextEncoder + ?Sized> TextEncoder for Box<E> {
    fn provider_id(&self) -> &str {
        (**self).provider_id()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn pooling(&self) -> &str {
        (**self).pooling()
    }
    fn encode_text(&self, text: &str) -> Result<RawEmbedding, EmbeddingError> {
        (**self).encode_text(text)
    }
}

impl<E: ImageEncoder + ?Sized> ImageEncoder for Box<E> {
    fn provider_id(&self) -> &str {
        (**self).provider_id()
    }
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn pooling(&self) -> &str {
        (**self).pooling()
    }
    fn encode_image(&self, bytes: &[u8]) -> Result<RawEmbedding, EmbeddingError> {
        (**self).encode_image(bytes)
    }
}

/// Wraps an encoder and counts calls that reach it.
#[derive(Debug, Default)]
pub struct Counted<E> {
    inner: E,
    calls: AtomicUsize,
}

impl<E> Counted<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: TextEncoder> TextEncoder for Counted<E> {
    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn pooling(&self) -> &str {
        self.inner.pooling()
    }
    fn encode_text(&self, text: &str) -> Result<RawEmbedding, EmbeddingError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.encode_text(text)
    }
}

impl<E: ImageEncoder> ImageEncoder for Counted<E> {
    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn pooling(&self) -> &str {
        self.inner.pooling()
    }
    fn encode_image(&self, bytes: &[u8]) -> Result<RawEmbedding, EmbeddingError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.encode_image(bytes)
    }
}

pub type Embedded = (EmbeddingVector, Vec<EmbeddingVector>);

fn validate_raw(
    provider_id: &str,
    dim: usize,
    raw: RawEmbedding,
) -> Result<Embedded, EmbeddingError> {
    if raw.pooled.len() != dim {
        return Err(EmbeddingError::DimMismatch {
            expected: dim,
            actual: raw.pooled.len(),
        });
    }
    if let Some(bad) = raw.tokens.iter().find(|t| t.len() != dim) {
        return Err(EmbeddingError::DimMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    let unit = (l2_norm(&raw.pooled) - 1.0).abs() <= 1e-6;
    let pooled = EmbeddingVector::new(raw.pooled, provider_id, unit)?;
    let tokens = if raw.tokens.is_empty() {
        vec![EmbeddingVector::new(
            pooled.values().to_vec(),
            provider_id,
            false,
        )?]
    } else {
        raw.tokens
            .into_iter()
            .map(|t| EmbeddingVector::new(t, provider_id, false))
            .collect::<Result<_, _>>()?
    };
    Ok((pooled, tokens))
}

/// Cache key for a text input.
pub fn text_cache_key(provider_id: &str, text: &str) -> String {
    sha256_hex(format!("{provider_id}\0text\0{}", sha256_hex(text.as_bytes())).as_bytes())
}

/// Cache key for an image, addressed by its content hash.
pub fn image_cache_key(provider_id: &str, content_hash: &str) -> String {
    sha256_hex(format!("{provider_id}\0image\0{content_hash}").as_bytes())
}

/// Pooled vector and token sequence for `text`, served from `cache` when
/// present.
pub fn embed_text(
    text: &str,
    provider: &dyn TextEncoder,
    cache: &EmbeddingCache,
) -> Result<Embedded, EmbeddingError> {
    if text.trim().is_empty() {
        return Err(EmbeddingError::Invalid("empty text".into()));
    }
    let id = provider.provider_id();
    let key = text_cache_key(id, text);
    cache.get_or_compute(id, &key, || {
        let raw = provider.encode_text(text)?;
        let out = validate_raw(id, provider.dim(), raw)?;
        Ok((
            out,
            CacheMeta::new(
                id,
                &key,
                "text",
                &sha256_hex(text.as_bytes()),
                provider.pooling(),
            ),
        ))
    })
}

/// Like [`embed_text`] for the image stored at `image_ref`. The cache key
/// depends on the image bytes, not on the prompt that produced them.
pub fn embed_image(
    image_ref: &Path,
    provider: &dyn ImageEncoder,
    cache: &EmbeddingCache,
) -> Result<Embedded, EmbeddingError> {
    let bytes = std::fs::read(image_ref)
        .map_err(|_| EmbeddingError::MissingArtifact(image_ref.display().to_string()))?;
    embed_image_bytes(&bytes, provider, cache)
}

pub fn embed_image_bytes(
    bytes: &[u8],
    provider: &dyn ImageEncoder,
    cache: &EmbeddingCache,
) -> Result<Embedded, EmbeddingError> {
    let id = provider.provider_id();
    let content_hash = sha256_hex(bytes);
    let key = image_cache_key(id, &content_hash);
    cache.get_or_compute(id, &key, || {
        let raw = provider.encode_image(bytes)?;
        let out = validate_raw(id, provider.dim(), raw)?;
        Ok((
            out,
            CacheMeta::new(id, &key, "image", &content_hash, provider.pooling()),
        ))
    })
}

/// Raw cosine and the clamped, scaled score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub cosine: f64,
    pub score: f64,
}

pub const CLIP_SCORE_WEIGHT: f64 = 2.5;

pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    let dot: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| (x as f64 / na) * (y as f64 / nb))
        .sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// `2.5 * max(cos, 0)`, both inputs normalized first.
pub fn clip_score(
    image_vec: &EmbeddingVector,
    text_vec: &EmbeddingVector,
) -> Result<f64, EmbeddingError> {
    Ok(clip_score_full(image_vec, text_vec)?.score)
}

pub fn clip_score_full(
    image_vec: &EmbeddingVector,
    text_vec: &EmbeddingVector,
) -> Result<ClipScore, EmbeddingError> {
    let cosine = cosine(image_vec, text_vec)?;
    Ok(ClipScore {
        cosine,
        score: CLIP_SCORE_WEIGHT * cosine.max(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(x: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(x.to_vec(), "t", false).unwrap()
    }

    #[test]
    fn clip_score_basic_cases() {
        assert!((clip_score(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(clip_score(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(clip_score(&v(&[1.0, 0.0]), &v(&[-1.0, 0.0])).unwrap(), 0.0);
        assert!(matches!(
            clip_score(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(EmbeddingError::ZeroVector)
        ));
        let full = clip_score_full(&v(&[1.0, 0.0]), &v(&[-1.0, 0.0])).unwrap();
        assert_eq!(full.cosine, -1.0);
    }

    #[test]
    fn raw_without_tokens_yields_one_token() {
        let (pooled, tokens) = validate_raw(
            "p",
            2,
            RawEmbedding {
                pooled: vec![0.6, 0.8],
                tokens: vec![],
            },
        )
        .unwrap();
        assert!(pooled.is_normalized());
        assert_eq!(tokens.len(), 1);
        assert_eq!(tokens[0].values(), pooled.values());
    }

    #[test]
    fn dim_violation_is_reported() {
        let err = validate_raw(
            "p",
            16,
            RawEmbedding {
                pooled: vec![0.1; 17],
                tokens: vec![],
            },
        )
        .unwrap_err();
        assert!(matches!(
            err,
            EmbeddingError::DimMismatch {
                expected: 16,
                actual: 17
            }
        ));
    }
}
