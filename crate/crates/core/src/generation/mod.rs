//! Text-to-image generation with a content-addressed cache and a cost
//! ledger.

mod backend;
mod cache;
mod cost;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompting::PromptSpec;
use crate::util::{canonical_hash, sha256_hex};

pub use backend::{
    stub_generate, BackendImage, HttpT2IBackend, HttpT2IConfig, StubBackend, T2IBackend,
};
pub use cache::{ImageCache, Ledger, LedgerEntry};
pub use cost::{
    ledger_totals, BackendTotals, Billable, CostEntry, CostMode, CostModel, LedgerTotals,
};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("invalid generation params: {}", .0.join("; "))]
    InvalidParams(Vec<String>),
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("backend `{backend}` does not support these params: {reason}")]
    Unsupported { backend: String, reason: String },
    #[error("backend `{backend}` failed after {attempts} attempt(s): {message}")]
    Backend {
        backend: String,
        attempts: u32,
        message: String,
    },
    #[error("backend `{0}` returned no image bytes")]
    EmptyImage(String),
    #[error("image cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub backend_id: String,
    pub steps: u32,
    pub guidance_scale: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheduler_id: Option<String>,
    #[serde(default)]
    pub seed: u64,
    /// Steps and guidance are chosen by the provider and not sent.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub provider_managed: bool,
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), GenerationError> {
        let mut problems = Vec::new();
        if self.backend_id.trim().is_empty() {
            problems.push("backend_id is empty".to_string());
        }
        if self.steps < 1 {
            problems.push("steps must be at least 1".to_string());
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            problems.push(format!(
                "guidance_scale {} must be finite and non-negative",
                self.guidance_scale
            ));
        }
        for (name, v) in [("width", self.width), ("height", self.height)] {
            if v == 0 || v % 8 != 0 {
                problems.push(format!("{name} {v} must be a positive multiple of 8"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(GenerationError::InvalidParams(problems))
        }
    }

    pub fn with_steps(mut self, steps: u32) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

const KARRAS: &str = "DPM++ 2M Karras";
pub const PRESET_IDS: [&str; 6] = [
    "sd15",
    "sdxl",
    "sdxl-lightning",
    "flux-schnell",
    "flux-schnell-b4",
    "dalle3",
];

pub fn preset_params(backend_id: &str) -> Result<GenerationParams, GenerationError> {
    let base = |steps, guidance, size, scheduler: Option<&str>| GenerationParams {
        backend_id: backend_id.to_string(),
        steps,
        guidance_scale: guidance,
        width: size,
        height: size,
        scheduler_id: scheduler.map(str::to_string),
        seed: 0,
        provider_managed: false,
    };
    Ok(match backend_id {
        "sd15" => base(50, 7.5, 512, Some(KARRAS)),
        "sdxl" => base(50, 8.0, 1024, Some(KARRAS)),
        "sdxl-lightning" => base(4, 0.0, 1024, None),
        "flux-schnell" => base(4, 0.0, 1024, None),
        "flux-schnell-b4" => base(1, 0.0, 1024, None),
        "dalle3" => GenerationParams {
            provider_managed: true,
            ..base(1, 0.0, 1024, None)
        },
        other => return Err(GenerationError::UnknownBackend(other.to_string())),
    })
}

/// Hash over backend, both prompts and all params including the seed.
pub fn prompt_key(prompt: &PromptSpec, params: &GenerationParams) -> String {
    canonical_hash(&serde_json::json!({
        "backend_id": params.backend_id,
        "positive": prompt.positive,
        "negative": prompt.negative,
        "params": params,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedImageRecord {
    pub content_hash: String,
    pub prompt_key: String,
    /// Path of the image bytes relative to the cache root.
    pub image_ref: String,
    pub latency_s: f64,
    pub cost_usd: f64,
    pub created_at: String,
    pub backend_id: String,
    pub steps: u32,
}

/// Returns the cached record for `(prompt, params)` or calls the backend,
/// stores the bytes and record, and appends to the ledger. Cost is the
/// provider-reported value when present, else the cost model's rate, else
/// zero.
pub fn generate_image(
    prompt: &PromptSpec,
    params: &GenerationParams,
    backend: &dyn T2IBackend,
    cache: &ImageCache,
    ledger: Option<&Ledger>,
    costs: &CostModel,
) -> Result<GeneratedImageRecord, GenerationError> {
    params.validate()?;
    backend.check(params)?;
    let key = prompt_key(prompt, params);
    let _guard = cache.lock(&key);
    if let Some(record) = cache.get(&key)? {
        return Ok(record);
    }
    let start = Instant::now();
    let image = backend.generate(prompt, params)?;
    let latency_s = start.elapsed().as_secs_f64();
    if image.bytes.is_empty() {
        return Err(GenerationError::EmptyImage(backend.id().to_string()));
    }
    let cost_usd = image
        .cost_usd
        .or_else(|| costs.get(&params.backend_id).map(|e| e.unit_cost_usd))
        .unwrap_or(0.0)
        .max(0.0);
    let record = GeneratedImageRecord {
        content_hash: sha256_hex(&image.bytes),
        prompt_key: key.clone(),
        image_ref: cache.relative_bin(&key),
        latency_s,
        cost_usd,
        created_at: chrono::Utc::now().to_rfc3339(),
        backend_id: params.backend_id.clone(),
        steps: params.steps,
    };
    cache.put(&key, &image.bytes, &record)?;
    if let Some(ledger) = ledger {
        ledger.append(&LedgerEntry::from(&record))?;
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::{Strategy, NEGATIVE_PROMPT};

    pub(crate) fn prompt(text: &str) -> PromptSpec {
        PromptSpec {
            sample_id: "s".into(),
            strategy: Strategy::P1,
            positive: text.into(),
            negative: NEGATIVE_PROMPT.into(),
            keywords: vec![],
            style_tags: vec![],
            elaborator_id: None,
            fallback: false,
        }
    }

    #[test]
    fn presets_validate() {
        for id in PRESET_IDS {
            preset_params(id).unwrap().validate().unwrap();
        }
        assert!(matches!(
            preset_params("midjourney"),
            Err(GenerationError::UnknownBackend(_))
        ));
    }

    #[test]
    fn validation_lists_every_problem() {
        let p = GenerationParams {
            steps: 0,
            width: 100,
            height: 0,
            guidance_scale: -1.0,
            ..preset_params("sd15").unwrap()
        };
        match p.validate() {
            Err(GenerationError::InvalidParams(v)) => assert_eq!(v.len(), 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn key_depends_on_seed_and_steps() {
        let p = preset_params("sdxl").unwrap();
        let pr = prompt("a cat");
        let k = prompt_key(&pr, &p);
        assert_ne!(k, prompt_key(&pr, &p.clone().with_seed(1)));
        assert_ne!(k, prompt_key(&pr, &p.with_steps(25)));
    }
}
