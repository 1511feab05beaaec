//! Text-rewriting clients.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::PromptError;
use crate::util::{
    atomic_write, canonical_hash, credential_var, env_credential, path_safe, post_json, KeyLocks,
    RetryPolicy,
};

/// Chat-completion style request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteRequest {
    pub system: String,
    pub user: String,
    pub model_id: String,
    pub temperature: f64,
}

pub trait TextRewriter: Send + Sync {
    fn id(&self) -> &str;
    fn model_id(&self) -> &str;
    fn rewrite(&self, request: &RewriteRequest) -> Result<String, PromptError>;
}

impl<R: TextRewriter + ?Sized> TextRewriter for Box<R> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn model_id(&self) -> &str {
        (**self).model_id()
    }

    fn rewrite(&self, request: &RewriteRequest) -> Result<String, PromptError> {
        (**self).rewrite(request)
    }
}

enum StubMode {
    Canned(String),
    Echo(String),
}

/// Offline rewriter that records every request. A canned stub always
/// returns the same text; an echo stub returns a prefix plus the user text.
pub struct StubRewriter {
    id: String,
    mode: StubMode,
    calls: AtomicU64,
    requests: Mutex<Vec<RewriteRequest>>,
}

impl StubRewriter {
    pub fn canned(id: impl Into<String>, response: impl Into<String>) -> Self {
        Self::with_mode(id.into(), StubMode::Canned(response.into()))
    }

    pub fn echo(id: impl Into<String>, prefix: impl Into<String>) -> Self {
        Self::with_mode(id.into(), StubMode::Echo(prefix.into()))
    }

    fn with_mode(id: String, mode: StubMode) -> Self {
        Self {
            id,
            mode,
            calls: AtomicU64::new(0),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<RewriteRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl TextRewriter for StubRewriter {
    fn id(&self) -> &str {
        &self.id
    }

    fn model_id(&self) -> &str {
        "stub"
    }

    fn rewrite(&self, request: &RewriteRequest) -> Result<String, PromptError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.requests.lock().unwrap().push(request.clone());
        Ok(match &self.mode {
            StubMode::Canned(s) => s.clone(),
            StubMode::Echo(prefix) => format!("{prefix}{}", request.user),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpRewriterConfig {
    pub id: String,
    pub endpoint: String,
    pub model_id: String,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

fn default_timeout() -> f64 {
    60.0
}

/// Posts the request as JSON. The reply is read from `text`, or from
/// `choices[0].message.content` for chat-completion style servers. The
/// bearer token comes from `SYNTHSIGHT_<ID>_API_KEY` when set.
pub struct HttpRewriter {
    config: HttpRewriterConfig,
}

impl HttpRewriter {
    pub fn new(config: HttpRewriterConfig) -> Self {
        Self { config }
    }
}

impl TextRewriter for HttpRewriter {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn model_id(&self) -> &str {
        &self.config.model_id
    }

    fn rewrite(&self, request: &RewriteRequest) -> Result<String, PromptError> {
        let key = env_credential(&credential_var(&self.config.id));
        let body = serde_json::to_value(request).map_err(|e| PromptError::Config(e.to_string()))?;
        let resp = post_json(
            &self.config.endpoint,
            key.as_deref(),
            &body,
            Duration::from_secs_f64(self.config.timeout_s),
            &self.config.retry,
        )
        .map_err(|f| PromptError::Client {
            client: self.config.id.clone(),
            attempts: f.attempts,
            message: f.message,
        })?;
        resp.get("text")
            .and_then(|v| v.as_str())
            .or_else(|| {
                resp.pointer("/choices/0/message/content")
                    .and_then(|v| v.as_str())
            })
            .map(str::to_string)
            .ok_or_else(|| PromptError::Client {
                client: self.config.id.clone(),
                attempts: 1,
                message: "response has no text field".into(),
            })
    }
}

#[derive(Serialize, Deserialize)]
struct CachedReply {
    client: String,
    request: RewriteRequest,
    response: String,
}

/// Caches replies on disk under `<root>/rewrites/<client>/<hash>.json`,
/// keyed by the client id and the full request.
pub struct CachedRewriter<R> {
    inner: R,
    root: PathBuf,
    locks: KeyLocks,
}

impl<R: TextRewriter> CachedRewriter<R> {
    pub fn new(inner: R, root: impl Into<PathBuf>) -> Self {
        Self {
            inner,
            root: root.into(),
            locks: KeyLocks::default(),
        }
    }

    pub fn inner(&self) -> &R {
        &self.inner
    }
}

impl<R: TextRewriter> TextRewriter for CachedRewriter<R> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn rewrite(&self, request: &RewriteRequest) -> Result<String, PromptError> {
        let key = canonical_hash(&(self.inner.id(), request));
        let path = self
            .root
            .join("rewrites")
            .join(path_safe(self.inner.id()))
            .join(format!("{key}.json"));
        let _guard = self.locks.lock(&key);
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(hit) = serde_json::from_slice::<CachedReply>(&bytes) {
                return Ok(hit.response);
            }
            log::warn!("ignoring unreadable rewrite cache entry {}", path.display());
        }
        let response = self.inner.rewrite(request)?;
        let record = CachedReply {
            client: self.inner.id().to_string(),
            request: request.clone(),
            response: response.clone(),
        };
        let bytes = serde_json::to_vec(&record).map_err(|e| PromptError::Config(e.to_string()))?;
        atomic_write(&path, &bytes)?;
        Ok(response)
    }
}
