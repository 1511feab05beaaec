//! Generation backends.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{GenerationError, GenerationParams};
use crate::prompting::PromptSpec;
use crate::util::{canonical_hash, credential_var, env_credential, post_json, RetryPolicy};

#[derive(Debug, Clone, PartialEq)]
pub struct BackendImage {
    pub bytes: Vec<u8>,
    /// Cost reported by the provider, if any.
    pub cost_usd: Option<f64>,
}

pub trait T2IBackend: Send + Sync {
    fn id(&self) -> &str;

    /// Rejects params outside the backend's supported range.
    fn check(&self, params: &GenerationParams) -> Result<(), GenerationError>;

    fn generate(
        &self,
        prompt: &PromptSpec,
        params: &GenerationParams,
    ) -> Result<BackendImage, GenerationError>;
}

impl<B: T2IBackend + ?Sized> T2IBackend for Box<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn check(&self, params: &GenerationParams) -> Result<(), GenerationError> {
        (**self).check(params)
    }

    fn generate(
        &self,
        prompt: &PromptSpec,
        params: &GenerationParams,
    ) -> Result<BackendImage, GenerationError> {
        (**self).generate(prompt, params)
    }
}

const STUB_SIDE: usize = 16;

/// A 16x16 binary PPM whose pixels are SHA-256 in counter mode over a hash
/// of the prompts and params.
pub fn stub_generate(prompt: &PromptSpec, params: &GenerationParams) -> Vec<u8> {
    let seed = canonical_hash(&serde_json::json!({
        "positive": prompt.positive,
        "negative": prompt.negative,
        "params": params,
    }));
    let mut out = format!("P6\n{STUB_SIDE} {STUB_SIDE}\n255\n").into_bytes();
    let len = out.len() + STUB_SIDE * STUB_SIDE * 3;
    let mut counter = 0u64;
    while out.len() < len {
        let mut h = Sha256::new();
        h.update(seed.as_bytes());
        h.update(counter.to_le_bytes());
        out.extend_from_slice(&h.finalize());
        counter += 1;
    }
    out.truncate(len);
    out
}

/// Offline backend over [`stub_generate`], counting its calls.
#[derive(Debug, Default)]
pub struct StubBackend {
    calls: AtomicU64,
}

impl StubBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl T2IBackend for StubBackend {
    fn id(&self) -> &str {
        "stub"
    }

    fn check(&self, _params: &GenerationParams) -> Result<(), GenerationError> {
        Ok(())
    }

    fn generate(
        &self,
        prompt: &PromptSpec,
        params: &GenerationParams,
    ) -> Result<BackendImage, GenerationError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(BackendImage {
            bytes: stub_generate(prompt, params),
            cost_usd: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpT2IConfig {
    /// Adapter id; also names the credential variable.
    pub id: String,
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_id: Option<String>,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
    #[serde(default = "default_min_steps")]
    pub min_steps: u32,
    #[serde(default = "default_max_steps")]
    pub max_steps: u32,
    /// Accepted `(width, height)` pairs; any size when empty.
    #[serde(default)]
    pub sizes: Vec<(u32, u32)>,
}

fn default_timeout() -> f64 {
    120.0
}
fn default_min_steps() -> u32 {
    1
}
fn default_max_steps() -> u32 {
    150
}

/// JSON-over-HTTP adapter. Sends `{positive, negative, steps, guidance,
/// width, height, seed}`; steps and guidance are null for provider-managed
/// params. Expects `{image_b64, cost_usd?}` back.
pub struct HttpT2IBackend {
    config: HttpT2IConfig,
}

impl HttpT2IBackend {
    pub fn new(config: HttpT2IConfig) -> Self {
        Self { config }
    }

    pub fn request_body(
        &self,
        prompt: &PromptSpec,
        params: &GenerationParams,
    ) -> serde_json::Value {
        let (steps, guidance) = if params.provider_managed {
            (serde_json::Value::Null, serde_json::Value::Null)
        } else {
            (params.steps.into(), params.guidance_scale.into())
        };
        let mut body = serde_json::json!({
            "positive": prompt.positive,
            "negative": prompt.negative,
            "steps": steps,
            "guidance": guidance,
            "width": params.width,
            "height": params.height,
            "seed": params.seed,
        });
        if let Some(m) = &self.config.model_id {
            body["model_id"] = m.clone().into();
        }
        if let Some(s) = &params.scheduler_id {
            body["scheduler"] = s.clone().into();
        }
        body
    }
}

impl T2IBackend for HttpT2IBackend {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn check(&self, params: &GenerationParams) -> Result<(), GenerationError> {
        let unsupported = |reason: String| GenerationError::Unsupported {
            backend: self.config.id.clone(),
            reason,
        };
        if !params.provider_managed
            && !(self.config.min_steps..=self.config.max_steps).contains(&params.steps)
        {
            return Err(unsupported(format!(
                "steps {} outside {}..={}",
                params.steps, self.config.min_steps, self.config.max_steps
            )));
        }
        if !self.config.sizes.is_empty()
            && !self.config.sizes.contains(&(params.width, params.height))
        {
            return Err(unsupported(format!(
                "size {}x{}",
                params.width, params.height
            )));
        }
        Ok(())
    }

    fn generate(
        &self,
        prompt: &PromptSpec,
        params: &GenerationParams,
    ) -> Result<BackendImage, GenerationError> {
        let key = env_credential(&credential_var(&self.config.id));
        let fail = |attempts, message| GenerationError::Backend {
            backend: self.config.id.clone(),
            attempts,
            message,
        };
        let resp = post_json(
            &self.config.endpoint,
            key.as_deref(),
            &self.request_body(prompt, params),
            Duration::from_secs_f64(self.config.timeout_s),
            &self.config.retry,
        )
        .map_err(|f| fail(f.attempts, f.message))?;
        let b64 = resp
            .get("image_b64")
            .and_then(|v| v.as_str())
            .ok_or_else(|| fail(1, "response has no image_b64".into()))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(b64)
            .map_err(|e| fail(1, format!("bad base64: {e}")))?;
        Ok(BackendImage {
            bytes,
            cost_usd: resp.get("cost_usd").and_then(|v| v.as_f64()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::preset_params;
    use crate::generation::tests::prompt;
    use crate::util::testserver;

    #[test]
    fn stub_is_a_valid_ppm() {
        let bytes = stub_generate(&prompt("x"), &preset_params("sd15").unwrap());
        assert!(bytes.starts_with(b"P6\n16 16\n255\n"));
        assert_eq!(bytes.len(), 13 + 768);
    }

    fn http(endpoint: String) -> HttpT2IBackend {
        HttpT2IBackend::new(HttpT2IConfig {
            id: "remote".into(),
            endpoint,
            model_id: None,
            retry: RetryPolicy::immediate(3),
            timeout_s: 5.0,
            min_steps: 1,
            max_steps: 60,
            sizes: vec![(1024, 1024)],
        })
    }

    #[test]
    fn http_request_carries_preset_values() {
        let img = base64::engine::general_purpose::STANDARD.encode(b"abc");
        let server = testserver::spawn(vec![
            (500, "{}".into()),
            (200, format!(r#"{{"image_b64":"{img}","cost_usd":0.03}}"#)),
        ]);
        let backend = http(server.url.clone());
        let params = preset_params("sdxl").unwrap();
        backend.check(&params).unwrap();
        let out = backend.generate(&prompt("a dog"), &params).unwrap();
        assert_eq!(out.bytes, b"abc");
        assert_eq!(out.cost_usd, Some(0.03));
        let sent = server.requests.lock().unwrap().clone();
        assert_eq!(sent.len(), 2);
        assert_eq!(sent[1]["steps"], 50);
        assert_eq!(sent[1]["guidance"], 8.0);
        assert_eq!(sent[1]["width"], 1024);
        assert_eq!(sent[1]["height"], 1024);
    }

    #[test]
    fn provider_managed_fields_are_null() {
        let backend = http("http://127.0.0.1:9/unused".into());
        let body = backend.request_body(&prompt("a"), &preset_params("dalle3").unwrap());
        assert!(body["steps"].is_null());
        assert!(body["guidance"].is_null());
    }

    #[test]
    fn check_rejects_out_of_range() {
        let backend = http("http://127.0.0.1:9/unused".into());
        assert!(backend.check(&preset_params("sd15").unwrap()).is_err());
        let p = preset_params("sdxl").unwrap().with_steps(100);
        assert!(matches!(
            backend.check(&p),
            Err(GenerationError::Unsupported { .. })
        ));
    }

    #[test]
    fn client_errors_are_not_retried() {
        let server = testserver::spawn(vec![(400, "{}".into())]);
        let backend = http(server.url.clone());
        match backend.generate(&prompt("a"), &preset_params("sdxl").unwrap()) {
            Err(GenerationError::Backend { attempts, .. }) => assert_eq!(attempts, 1),
            other => panic!("{other:?}"),
        }
    }
}
