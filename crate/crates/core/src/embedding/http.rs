use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{EmbeddingError, ImageEncoder, RawEmbedding, TextEncoder};
use crate::util::{credential_var, env_credential, post_json, RetryPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEncoderConfig {
    pub provider_id: String,
    pub endpoint: String,
    pub model_id: String,
    pub dim: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub timeout_s: u64,
}

fn default_timeout() -> u64 {
    60
}

/// Remote embedding endpoint. Requests are `{model_id, input}` for text and
/// `{model_id, image_b64}` for images; the response carries `pooled` and
/// optionally `tokens`. The bearer token is read from
/// `SYNTHSIGHT_<PROVIDER>_API_KEY`.
#[derive(Debug, Clone)]
pub struct HttpEncoder {
    config: HttpEncoderConfig,
}

impl HttpEncoder {
    pub fn new(config: HttpEncoderConfig) -> Self {
        Self { config }
    }

    fn call(&self, body: serde_json::Value) -> Result<RawEmbedding, EmbeddingError> {
        let key = env_credential(&credential_var(&self.config.provider_id));
        let fail = |message: String, attempts: u32| EmbeddingError::Provider {
            provider: self.config.provider_id.clone(),
            attempts,
            message,
        };
        let value = post_json(
            &self.config.endpoint,
            key.as_deref(),
            &body,
            Duration::from_secs(self.config.timeout_s),
            &self.config.retry,
        )
        .map_err(|f| fail(f.message, f.attempts))?;
        serde_json::from_value(value).map_err(|e| fail(format!("bad response: {e}"), 1))
    }
}

impl TextEncoder for HttpEncoder {
    fn provider_id(&self) -> &str {
        &self.config.provider_id
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode_text(&self, text: &str) -> Result<RawEmbedding, EmbeddingError> {
        self.call(json!({ "model_id": self.config.model_id, "input": text }))
    }
}

impl ImageEncoder for HttpEncoder {
    fn provider_id(&self) -> &str {
        &self.config.provider_id
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode_image(&self, bytes: &[u8]) -> Result<RawEmbedding, EmbeddingError> {
        let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
        self.call(json!({ "model_id": self.config.model_id, "image_b64": b64 }))
    }
}
