use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Embedded, EmbeddingError, EmbeddingVector};
use crate::util::read_jsonl;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OracleRecord {
    sample_id: String,
    dim: usize,
    values: Vec<f32>,
}

/// Curated image features keyed by sample id, read from a record-per-line
/// file of `{sample_id, dim, values}`.
#[derive(Debug, Clone)]
pub struct OracleFeatures {
    provider_id: String,
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

impl OracleFeatures {
    pub fn load(path: &Path, provider_id: impl Into<String>) -> Result<Self, EmbeddingError> {
        let records: Vec<OracleRecord> = read_jsonl(path)?;
        let mut dim = None;
        let mut vectors = HashMap::with_capacity(records.len());
        for (i, r) in records.into_iter().enumerate() {
            if r.values.len() != r.dim {
                return Err(EmbeddingError::Oracle(format!(
                    "record {}: dim {} but {} values",
                    i + 1,
                    r.dim,
                    r.values.len()
                )));
            }
            match dim {
                None => dim = Some(r.dim),
                Some(d) if d != r.dim => {
                    return Err(EmbeddingError::DimMismatch {
                        expected: d,
                        actual: r.dim,
                    })
                }
                _ => {}
            }
            if vectors.insert(r.sample_id.clone(), r.values).is_some() {
                return Err(EmbeddingError::Oracle(format!(
                    "duplicate sample id {}",
                    r.sample_id
                )));
            }
        }
        let dim = dim.ok_or_else(|| EmbeddingError::Oracle("empty feature file".into()))?;
        Ok(Self {
            provider_id: provider_id.into(),
            dim,
            vectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// The curated vector as a unit-norm pooled vector plus `tokens` copies
    /// of it, so the pack has the same shape as generated-image features.
    pub fn lookup(&self, sample_id: &str, tokens: usize) -> Result<Embedded, EmbeddingError> {
        let values = self
            .vectors
            .get(sample_id)
            .ok_or_else(|| EmbeddingError::Oracle(format!("no features for sample {sample_id}")))?;
        let pooled = EmbeddingVector::normalized_from(values.clone(), &self.provider_id)?;
        let token = EmbeddingVector::new(pooled.values().to_vec(), &self.provider_id, false)?;
        Ok((pooled, vec![token; tokens.max(1)]))
    }
}
