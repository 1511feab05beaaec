//! Providers instantiated from a config, wrapped so every call that
//! reaches them is counted.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::config::{AdapterKind, EncoderSpec, ExperimentConfig, RewriterSpec};
use super::OrchestratorError;
use crate::embedding::{
    Counted, HashImageEncoder, HashTextEncoder, HttpEncoder, ImageEncoder, TextEncoder,
};
use crate::generation::{
    BackendImage, GenerationError, GenerationParams, HttpT2IBackend, StubBackend, T2IBackend,
};
use crate::prompting::{
    CachedRewriter, HttpRewriter, PromptError, PromptSpec, RewriteRequest, StubRewriter,
    TextRewriter,
};
use crate::util::{credential_var, env_credential};

/// Counts calls reaching a generation backend.
pub struct CountedBackend<B> {
    inner: B,
    calls: AtomicU64,
}

impl<B> CountedBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: T2IBackend> T2IBackend for CountedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn check(&self, params: &GenerationParams) -> Result<(), GenerationError> {
        self.inner.check(params)
    }

    fn generate(
        &self,
        prompt: &PromptSpec,
        params: &GenerationParams,
    ) -> Result<BackendImage, GenerationError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.generate(prompt, params)
    }
}

/// Counts calls reaching a text rewriter.
pub struct CountedRewriter<R> {
    inner: R,
    calls: AtomicU64,
}

impl<R> CountedRewriter<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<R: TextRewriter> TextRewriter for CountedRewriter<R> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn rewrite(&self, request: &RewriteRequest) -> Result<String, PromptError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.rewrite(request)
    }
}

/// Calls that reached each provider, past every cache.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub generation: u64,
    pub text_embedding: u64,
    pub image_embedding: u64,
    pub rewrites: u64,
}

impl CallCounts {
    pub fn total(&self) -> u64 {
        self.generation + self.text_embedding + self.image_embedding + self.rewrites
    }
}

/// Everything a run talks to.
pub struct Services {
    pub backend: Option<CountedBackend<Box<dyn T2IBackend>>>,
    pub text: Counted<Box<dyn TextEncoder>>,
    pub image: Counted<Box<dyn ImageEncoder>>,
    /// The raw client is counted underneath the on-disk reply cache.
    pub elaborator: Option<CachedRewriter<CountedRewriter<Box<dyn TextRewriter>>>>,
}

fn need_credential(id: &str) -> Result<(), OrchestratorError> {
    let var = credential_var(id);
    if env_credential(&var).is_none() {
        return Err(OrchestratorError::MissingCredential(var));
    }
    Ok(())
}

impl Services {
    /// Builds the configured providers. With `offline` any remote provider
    /// is an error; otherwise each remote provider needs its credential
    /// variable set.
    pub fn from_config(cfg: &ExperimentConfig, offline: bool) -> Result<Self, OrchestratorError> {
        let remote = cfg.remote_providers();
        if offline && !remote.is_empty() {
            return Err(OrchestratorError::Offline(remote));
        }
        let backend: Option<Box<dyn T2IBackend>> = if cfg.method.generates_images() {
            Some(match (cfg.generation.adapter, &cfg.generation.http) {
                (AdapterKind::Http, Some(http)) => {
                    need_credential(&http.id)?;
                    Box::new(HttpT2IBackend::new(http.clone()))
                }
                (AdapterKind::Http, None) => {
                    return Err(OrchestratorError::Config(vec![
                        "generation.http is required".into(),
                    ]))
                }
                (AdapterKind::Stub, _) => Box::new(StubBackend::new()),
            })
        } else {
            None
        };
        let text: Box<dyn TextEncoder> = match &cfg.providers.text {
            EncoderSpec::Hash { id, dim, tokens } => {
                let enc = HashTextEncoder::new(id.clone(), *dim);
                Box::new(match tokens {
                    Some(n) => enc.with_max_tokens(*n),
                    None => enc.with_max_tokens(cfg.dataset.max_tokens),
                })
            }
            EncoderSpec::Http(c) => {
                need_credential(&c.provider_id)?;
                Box::new(HttpEncoder::new(c.clone()))
            }
        };
        let image: Box<dyn ImageEncoder> = match &cfg.providers.image {
            EncoderSpec::Hash { id, dim, tokens } => {
                let enc = HashImageEncoder::new(id.clone(), *dim);
                Box::new(match tokens {
                    Some(n) => enc.with_patches(*n),
                    None => enc,
                })
            }
            EncoderSpec::Http(c) if cfg.method.generates_images() => {
                need_credential(&c.provider_id)?;
                Box::new(HttpEncoder::new(c.clone()))
            }
            // Only the width matters when no image is ever encoded.
            EncoderSpec::Http(c) => Box::new(HashImageEncoder::new(c.provider_id.clone(), c.dim)),
        };
        let elaborator: Option<Box<dyn TextRewriter>> = match &cfg.providers.elaborator {
            None => None,
            Some(RewriterSpec::Stub { id, text, echo }) => Some(if *echo {
                Box::new(StubRewriter::echo(id.clone(), text.clone()))
            } else {
                Box::new(StubRewriter::canned(id.clone(), text.clone()))
            }),
            Some(RewriterSpec::Http(c)) => {
                need_credential(&c.id)?;
                Some(Box::new(HttpRewriter::new(c.clone())))
            }
        };
        Ok(Self::new(
            backend,
            text,
            image,
            elaborator,
            &cfg.cache_dir(),
        ))
    }

    pub fn new(
        backend: Option<Box<dyn T2IBackend>>,
        text: Box<dyn TextEncoder>,
        image: Box<dyn ImageEncoder>,
        elaborator: Option<Box<dyn TextRewriter>>,
        cache_dir: &Path,
    ) -> Self {
        Self {
            backend: backend.map(CountedBackend::new),
            text: Counted::new(text),
            image: Counted::new(image),
            elaborator: elaborator.map(|e| CachedRewriter::new(CountedRewriter::new(e), cache_dir)),
        }
    }

    pub fn calls(&self) -> CallCounts {
        CallCounts {
            generation: self.backend.as_ref().map_or(0, |b| b.calls()),
            text_embedding: self.text.calls() as u64,
            image_embedding: self.image.calls() as u64,
            rewrites: self.elaborator.as_ref().map_or(0, |e| e.inner().calls()),
        }
    }

    pub fn elaborator(&self) -> Option<&dyn TextRewriter> {
        self.elaborator.as_ref().map(|e| e as &dyn TextRewriter)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrator::parse_config_str;

    #[test]
    fn offline_rejects_remote_providers() {
        let text = r#"
experiment_id = "x"
method = "gen_image"
[dataset]
path = "d.csv"
[generation]
backend = "sdxl"
adapter = "http"
[generation.http]
id = "remote"
endpoint = "http://127.0.0.1:9"
"#;
        let cfg = parse_config_str(text, Path::new("/tmp")).unwrap();
        match Services::from_config(&cfg, true) {
            Err(OrchestratorError::Offline(v)) => {
                assert_eq!(v, vec!["generation.adapter".to_string()])
            }
            Err(other) => panic!("{other:?}"),
            Ok(_) => panic!("offline run accepted a remote backend"),
        }
        assert!(matches!(
            Services::from_config(&cfg, false),
            Err(OrchestratorError::MissingCredential(v)) if v == "SYNTHSIGHT_REMOTE_API_KEY"
        ));
    }
}
