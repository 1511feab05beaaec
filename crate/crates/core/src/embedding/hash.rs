use sha2::{Digest, Sha256};

use super::{EmbeddingError, ImageEncoder, RawEmbedding, TextEncoder};

/// Deterministic projection of `input` to `dim` values in `[-1, 1)`.
///
/// Component `j` takes the first eight bytes of
/// `sha256(provider_id || 0x00 || input || 0x00 || j as u32 le)` as a
/// little-endian u64, keeps the top 53 bits as a fraction in `[0, 1)` and
/// maps it affinely to `[-1, 1)`.
pub fn hash_projection(provider_id: &str, input: &[u8], dim: usize) -> Vec<f32> {
    (0..dim as u32)
        .map(|j| {
            let mut h = Sha256::new();
            h.update(provider_id.as_bytes());
            h.update([0u8]);
            h.update(input);
            h.update([0u8]);
            h.update(j.to_le_bytes());
            let digest = h.finalize();
            let word = u64::from_le_bytes(digest[..8].try_into().unwrap());
            let unit = (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            (unit * 2.0 - 1.0) as f32
        })
        .collect()
}

fn normalized_mean(tokens: &[Vec<f32>], dim: usize) -> Result<Vec<f32>, EmbeddingError> {
    let mut acc = vec![0f64; dim];
    for t in tokens {
        for (a, &x) in acc.iter_mut().zip(t) {
            *a += x as f64;
        }
    }
    let norm = acc.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(acc.iter().map(|a| (a / norm) as f32).collect())
}

/// Offline text provider: one hash-projected vector per whitespace token,
/// pooled by the normalized mean.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    provider_id: String,
    dim: usize,
    max_tokens: usize,
}

impl HashTextEncoder {
    pub fn new(provider_id: impl Into<String>, dim: usize) -> Self {
        Self {
            provider_id: provider_id.into(),
            dim,
            max_tokens: 64,
        }
    }

    /// Only the first `max_tokens` tokens produce token vectors and enter
    /// the pooled mean.
    pub fn with_max_tokens(mut self, max_tokens: usize) -> Self {
        self.max_tokens = max_tokens.max(1);
        self
    }
}

impl TextEncoder for HashTextEncoder {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn pooling(&self) -> &str {
        "normalized mean of hash-projected whitespace tokens"
    }

    fn encode_text(&self, text: &str) -> Result<RawEmbedding, EmbeddingError> {
        let tokens: Vec<Vec<f32>> = text
            .split_whitespace()
            .take(self.max_tokens)
            .map(|t| hash_projection(&self.provider_id, t.as_bytes(), self.dim))
            .collect();
        if tokens.is_empty() {
            return Err(EmbeddingError::Invalid("empty text".into()));
        }
        Ok(RawEmbedding {
            pooled: normalized_mean(&tokens, self.dim)?,
            tokens,
        })
    }
}

/// Offline image provider: the byte buffer is cut into `patches` contiguous
/// chunks, each hash-projected to one token; pooled by the normalized mean.
#[derive(Debug, Clone)]
pub struct HashImageEncoder {
    provider_id: String,
    dim: usize,
    patches: usize,
}

impl HashImageEncoder {
    pub fn new(provider_id: impl Into<String>, dim: usize) -> Self {
        Self {
            provider_id: provider_id.into(),
            dim,
            patches: 4,
        }
    }

    pub fn with_patches(mut self, patches: usize) -> Self {
        self.patches = patches.max(1);
        self
    }

    pub fn patches(&self) -> usize {
        self.patches
    }
}

impl ImageEncoder for HashImageEncoder {
    fn provider_id(&self) -> &str {
        &self.provider_id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn pooling(&self) -> &str {
        "normalized mean of hash-projected byte patches"
    }

    fn encode_image(&self, bytes: &[u8]) -> Result<RawEmbedding, EmbeddingError> {
        if bytes.is_empty() {
            return Err(EmbeddingError::Invalid("empty image".into()));
        }
        let chunk = bytes.len().div_ceil(self.patches);
        let tokens: Vec<Vec<f32>> = bytes
            .chunks(chunk)
            .map(|c| hash_projection(&self.provider_id, c, self.dim))
            .collect();
        Ok(RawEmbedding {
            pooled: normalized_mean(&tokens, self.dim)?,
            tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_is_in_range_and_provider_specific() {
        let a = hash_projection("siglip-like", b"hello", 32);
        let b = hash_projection("dino-like", b"hello", 32);
        assert!(a.iter().all(|v| (-1.0..1.0).contains(v)));
        assert_ne!(a, b);
        assert_eq!(a, hash_projection("siglip-like", b"hello", 32));
    }

    #[test]
    fn image_patches_cover_all_bytes() {
        let enc = HashImageEncoder::new("img", 8);
        let raw = enc.encode_image(&[1, 2, 3, 4, 5, 6, 7, 8, 9]).unwrap();
        assert_eq!(raw.tokens.len(), 3);
        let raw = enc.encode_image(&[0u8; 800]).unwrap();
        assert_eq!(raw.tokens.len(), 4);
    }
}
