//! Fusion heads mapping a [`FeaturePack`] to class logits.
//!
//! * F1 projects the pooled text and image vectors to the model width,
//!   concatenates them and classifies with a two-layer MLP.
//! * F2 runs decoder-style cross-attention blocks in which projected text
//!   tokens query projected image tokens, then mean-pools the text positions.
//! * F3 maps the pooled image vector to `K` visual prefix tokens (one learned
//!   projection each), prepends them to the text tokens and runs an `L`-layer
//!   self-attention encoder over the joint sequence. The prefix carries no
//!   positional signal, so permuting prefix tokens leaves the logits unchanged.

mod heatmap;
mod network;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::FeaturePack;
use crate::tensorcore::{ParamStore, Real, Tensor2D, TensorError};

pub use heatmap::{export_attention, HeatmapTable};
pub use network::{AttentionBundle, AttentionLayout, ForwardCache, ForwardOutput, PreparedPack};

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("invalid fusion config: {0}")]
    Config(String),
    #[error("input dim mismatch for {what}: head expects {expected}, got {actual}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("empty {0} token sequence")]
    EmptySequence(&'static str),
    #[error("attention export: {0}")]
    Export(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FusionMechanism {
    #[serde(rename = "F1_concat", alias = "F1")]
    Concat,
    #[serde(rename = "F2_cross_attention", alias = "F2")]
    CrossAttention,
    #[serde(rename = "F3_deep_prefix", alias = "F3")]
    DeepPrefix,
}

impl FusionMechanism {
    pub const ALL: [FusionMechanism; 3] = [Self::Concat, Self::CrossAttention, Self::DeepPrefix];

    pub fn short_name(self) -> &'static str {
        match self {
            Self::Concat => "F1",
            Self::CrossAttention => "F2",
            Self::DeepPrefix => "F3",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Self::Concat => "F1 (Late Fusion via Concat)",
            Self::CrossAttention => "F2 (Cross-Attention)",
            Self::DeepPrefix => "F3 (MMBT-like Deep Fusion)",
        }
    }
}

impl fmt::Display for FusionMechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for FusionMechanism {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "F1" | "F1_concat" | "concat" => Ok(Self::Concat),
            "F2" | "F2_cross_attention" | "cross_attention" => Ok(Self::CrossAttention),
            "F3" | "F3_deep_prefix" | "deep_prefix" => Ok(Self::DeepPrefix),
            other => Err(FusionError::Config(format!(
                "unknown fusion mechanism `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub mechanism: FusionMechanism,
    pub model_dim: usize,
    pub heads: usize,
    /// Encoder depth for F3.
    pub encoder_layers: usize,
    /// Stacked cross-attention blocks for F2.
    pub cross_attention_blocks: usize,
    /// Number of visual prefix tokens for F3.
    pub visual_prefix_len: usize,
    pub num_classes: usize,
    pub hidden_dim: usize,
    /// Train-mode dropout on hidden activations; 0 disables it.
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mechanism: FusionMechanism::CrossAttention,
            model_dim: 32,
            heads: 2,
            encoder_layers: 2,
            cross_attention_blocks: 1,
            visual_prefix_len: 4,
            num_classes: 2,
            hidden_dim: 64,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let mut problems = Vec::new();
        if self.model_dim == 0 {
            problems.push("model_dim must be positive".to_string());
        }
        if self.hidden_dim == 0 {
            problems.push("hidden_dim must be positive".to_string());
        }
        if self.num_classes < 2 {
            problems.push(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.layer_norm_eps <= 0.0 {
            problems.push("layer_norm_eps must be positive".to_string());
        }
        match self.mechanism {
            FusionMechanism::Concat => {}
            FusionMechanism::CrossAttention | FusionMechanism::DeepPrefix => {
                if self.heads == 0 || self.model_dim % self.heads != 0 {
                    problems.push(format!(
                        "heads ({}) must divide model_dim ({})",
                        self.heads, self.model_dim
                    ));
                }
                if self.mechanism == FusionMechanism::CrossAttention
                    && self.cross_attention_blocks == 0
                {
                    problems.push("cross_attention_blocks must be >= 1".to_string());
                }
                if self.mechanism == FusionMechanism::DeepPrefix {
                    if self.encoder_layers == 0 {
                        problems.push("encoder_layers must be >= 1 for F3".to_string());
                    }
                    if self.visual_prefix_len == 0 {
                        problems.push("visual_prefix_len must be >= 1 for F3".to_string());
                    }
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(FusionError::Config(problems.join("; ")))
        }
    }

    pub(crate) fn block_count(&self) -> usize {
        match self.mechanism {
            FusionMechanism::Concat => 0,
            FusionMechanism::CrossAttention => self.cross_attention_blocks,
            FusionMechanism::DeepPrefix => self.encoder_layers,
        }
    }
}

/// Architecture plus input widths; everything needed to interpret a
/// parameter store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub config: FusionConfig,
    pub text_dim: usize,
    pub image_dim: usize,
}

/// A fusion head and its trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead<T> {
    pub spec: HeadSpec,
    pub params: ParamStore<T>,
    pub init_seed: u64,
}

impl<T: Real> FusionHead<T> {
    /// Builds a head with seeded Xavier-uniform weights, zero biases and
    /// unit layer-norm gains.
    pub fn build(
        config: FusionConfig,
        text_dim: usize,
        image_dim: usize,
        seed: u64,
    ) -> Result<Self, FusionError> {
        config.validate()?;
        if text_dim == 0 || image_dim == 0 {
            return Err(FusionError::Config("input dims must be positive".into()));
        }
        let spec = HeadSpec {
            config,
            text_dim,
            image_dim,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = network::init_params(&spec, &mut rng)?;
        Ok(Self {
            spec,
            params,
            init_seed: seed,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.spec.config
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Forward pass for one sample. `train_rng` enables dropout when the
    /// config's rate is positive.
    pub fn forward(
        &self,
        pack: &FeaturePack,
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput<T>, FusionError> {
        let prepared = PreparedPack::from_pack(pack)?;
        self.forward_prepared(&prepared, train_rng)
    }

    pub fn forward_prepared(
        &self,
        pack: &PreparedPack<T>,
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput<T>, FusionError> {
        network::forward(&self.spec, &self.params, pack, train_rng).map(|(out, _)| out)
    }

    /// Mean cross-entropy over the batch; gradients are left in the store.
    pub fn loss_and_grad(
        &mut self,
        batch: &[&PreparedPack<T>],
        labels: &[usize],
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<T, FusionError> {
        network::batch_loss_and_grad(&self.spec, &mut self.params, batch, labels, train_rng)
    }

    pub fn logits(&self, pack: &PreparedPack<T>) -> Result<Tensor2D<T>, FusionError> {
        Ok(self.forward_prepared(pack, None)?.logits)
    }
}

/// Same as [`FusionHead::build`].
pub fn build_fusion_head<T: Real>(
    config: FusionConfig,
    text_dim: usize,
    image_dim: usize,
    seed: u64,
) -> Result<FusionHead<T>, FusionError> {
    FusionHead::build(config, text_dim, image_dim, seed)
}

/// Loss and gradient over a batch for an arbitrary parameter store. Used by
/// gradient verification, where the store is perturbed coordinate-wise.
pub fn batch_loss_and_grad<T: Real>(
    spec: &HeadSpec,
    params: &mut ParamStore<T>,
    batch: &[&PreparedPack<T>],
    labels: &[usize],
) -> Result<T, FusionError> {
    network::batch_loss_and_grad(spec, params, batch, labels, None)
}

/// Forward pass with caches, for callers that inspect intermediates.
pub fn forward_with_cache<T: Real>(
    spec: &HeadSpec,
    params: &ParamStore<T>,
    pack: &PreparedPack<T>,
) -> Result<(ForwardOutput<T>, ForwardCache<T>), FusionError> {
    network::forward(spec, params, pack, None)
}
