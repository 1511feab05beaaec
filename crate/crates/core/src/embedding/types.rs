use serde::{Deserialize, Serialize};

use super::EmbeddingError;

/// A single encoder output vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f32>,
    provider_id: String,
    normalized: bool,
}

impl EmbeddingVector {
    /// Checks finiteness and, when `normalized` is claimed, unit norm.
    pub fn new(
        values: Vec<f32>,
        provider_id: impl Into<String>,
        normalized: bool,
    ) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Invalid("empty vector".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::Invalid(format!("non-finite entry at {i}")));
        }
        if normalized {
            let norm = l2_norm(&values);
            if (norm - 1.0).abs() > 1e-6 {
                return Err(EmbeddingError::Invalid(format!(
                    "claimed unit norm but |v| = {norm}"
                )));
            }
        }
        Ok(Self {
            values,
            provider_id: provider_id.into(),
            normalized,
        })
    }

    /// Scales `values` to unit L2 norm.
    pub fn normalized_from(
        values: Vec<f32>,
        provider_id: impl Into<String>,
    ) -> Result<Self, EmbeddingError> {
        let norm = l2_norm(&values);
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbeddingError::ZeroVector);
        }
        let unit = values.iter().map(|&v| (v as f64 / norm) as f32).collect();
        // f32 rounding can leave the norm a few ulps off; the check uses 1e-6.
        Self::new(unit, provider_id, true)
    }

    pub fn zeros(dim: usize, provider_id: impl Into<String>) -> Self {
        Self {
            values: vec![0.0; dim],
            provider_id: provider_id.into(),
            normalized: false,
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn provider_id(&self) -> &str {
        &self.provider_id
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }
}

pub(crate) fn l2_norm(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt()
}

/// Everything a fusion head consumes for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePack {
    pub text_tokens: Vec<EmbeddingVector>,
    pub image_tokens: Vec<EmbeddingVector>,
    pub text_pooled: EmbeddingVector,
    pub image_pooled: EmbeddingVector,
}

impl FeaturePack {
    pub fn new(
        text_pooled: EmbeddingVector,
        text_tokens: Vec<EmbeddingVector>,
        image_pooled: EmbeddingVector,
        image_tokens: Vec<EmbeddingVector>,
    ) -> Result<Self, EmbeddingError> {
        let pack = Self {
            text_tokens,
            image_tokens,
            text_pooled,
            image_pooled,
        };
        pack.validate()?;
        Ok(pack)
    }

    /// Text features with a single all-zero image token; the image pathway
    /// of a head then contributes only its bias terms.
    pub fn text_only(
        text_pooled: EmbeddingVector,
        text_tokens: Vec<EmbeddingVector>,
        image_dim: usize,
    ) -> Result<Self, EmbeddingError> {
        let blank = EmbeddingVector::zeros(image_dim, "blank");
        Self::new(text_pooled, text_tokens, blank.clone(), vec![blank])
    }

    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if self.text_tokens.is_empty() || self.image_tokens.is_empty() {
            return Err(EmbeddingError::Invalid(
                "token sequences must be non-empty".into(),
            ));
        }
        let td = self.text_pooled.dim();
        let id = self.image_pooled.dim();
        if let Some(bad) = self.text_tokens.iter().find(|t| t.dim() != td) {
            return Err(EmbeddingError::DimMismatch {
                expected: td,
                actual: bad.dim(),
            });
        }
        if let Some(bad) = self.image_tokens.iter().find(|t| t.dim() != id) {
            return Err(EmbeddingError::DimMismatch {
                expected: id,
                actual: bad.dim(),
            });
        }
        Ok(())
    }

    pub fn text_dim(&self) -> usize {
        self.text_pooled.dim()
    }

    pub fn image_dim(&self) -> usize {
        self.image_pooled.dim()
    }
}
