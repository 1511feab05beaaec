use rand_chacha::ChaCha8Rng;

use super::{FusionError, FusionMechanism, HeadSpec};
use crate::embedding::FeaturePack;
use crate::tensorcore::{
    cross_entropy, dense_affine, dense_affine_backward, dropout, dropout_backward, gelu,
    gelu_backward, layer_norm, layer_norm_backward, mean_rows, mean_rows_backward,
    multi_head_attention, multi_head_attention_backward, xavier_uniform, AttentionCache,
    AttentionMaps, AttentionWeights, LayerNormCache, ParamStore, Real, Tensor2D,
};

type Grads<T> = Vec<(String, Tensor2D<T>)>;

/// A [`FeaturePack`] converted to tensors in the head's precision.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPack<T> {
    pub text_tokens: Tensor2D<T>,
    pub image_tokens: Tensor2D<T>,
    pub text_pooled: Tensor2D<T>,
    pub image_pooled: Tensor2D<T>,
}

impl<T: Real> PreparedPack<T> {
    pub fn from_pack(pack: &FeaturePack) -> Result<Self, FusionError> {
        if pack.text_tokens.is_empty() {
            return Err(FusionError::EmptySequence("text"));
        }
        if pack.image_tokens.is_empty() {
            return Err(FusionError::EmptySequence("image"));
        }
        let to_tensor = |vs: &[&[f32]]| -> Result<Tensor2D<T>, FusionError> {
            let rows: Vec<Vec<T>> = vs
                .iter()
                .map(|v| v.iter().map(|&x| T::lit(x as f64)).collect())
                .collect();
            Ok(Tensor2D::from_rows(&rows)?)
        };
        let text: Vec<&[f32]> = pack.text_tokens.iter().map(|e| e.values()).collect();
        let image: Vec<&[f32]> = pack.image_tokens.iter().map(|e| e.values()).collect();
        Ok(Self {
            text_tokens: to_tensor(&text)?,
            image_tokens: to_tensor(&image)?,
            text_pooled: to_tensor(&[pack.text_pooled.values()])?,
            image_pooled: to_tensor(&[pack.image_pooled.values()])?,
        })
    }

    /// Permutes image token rows; pooled vectors are untouched.
    pub fn with_image_order(&self, order: &[usize]) -> Self {
        let mut out = self.clone();
        out.image_tokens = self.image_tokens.permute_rows(order);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionLayout {
    /// Maps are `text_len x image_len`.
    Cross { text_len: usize, image_len: usize },
    /// Maps are square over `[prefix; text]`.
    Prefix { prefix_len: usize, text_len: usize },
}

/// Post-softmax attention weights of every attention layer of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBundle<T> {
    pub layout: AttentionLayout,
    pub layers: Vec<AttentionMaps<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// `1 x num_classes`.
    pub logits: Tensor2D<T>,
    pub attention: Option<AttentionBundle<T>>,
    /// F2 only: output of the first cross-attention sublayer, one row per
    /// text token.
    pub visual_summary: Option<Tensor2D<T>>,
}

#[derive(Debug, Clone)]
struct ClassifierCache<T> {
    z: Tensor2D<T>,
    u: Tensor2D<T>,
    g: Tensor2D<T>,
    mask: Option<Tensor2D<T>>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    self_attention: bool,
    attn: AttentionCache<T>,
    maps: AttentionMaps<T>,
    ln1: LayerNormCache<T>,
    h1: Tensor2D<T>,
    u: Tensor2D<T>,
    g: Tensor2D<T>,
    mask: Option<Tensor2D<T>>,
    ln2: LayerNormCache<T>,
}

/// Intermediates retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    inner: CacheKind<T>,
}

#[derive(Debug, Clone)]
enum CacheKind<T> {
    Concat {
        text_in: Tensor2D<T>,
        image_in: Tensor2D<T>,
        cls: ClassifierCache<T>,
    },
    Cross {
        text_in: Tensor2D<T>,
        image_in: Tensor2D<T>,
        blocks: Vec<BlockCache<T>>,
        cls: ClassifierCache<T>,
    },
    Prefix {
        text_in: Tensor2D<T>,
        image_in: Tensor2D<T>,
        blocks: Vec<BlockCache<T>>,
        cls: ClassifierCache<T>,
    },
}

pub(super) fn init_params<T: Real>(
    spec: &HeadSpec,
    rng: &mut ChaCha8Rng,
) -> Result<ParamStore<T>, FusionError> {
    let cfg = &spec.config;
    let d = cfg.model_dim;
    let mut store = ParamStore::new();
    add_affine(&mut store, "text_proj", spec.text_dim, d, rng)?;
    let classifier_in = match cfg.mechanism {
        FusionMechanism::Concat => {
            add_affine(&mut store, "image_proj", spec.image_dim, d, rng)?;
            2 * d
        }
        FusionMechanism::CrossAttention => {
            add_affine(&mut store, "image_proj", spec.image_dim, d, rng)?;
            for b in 0..cfg.block_count() {
                add_block(&mut store, &format!("block{b}"), d, cfg.hidden_dim, rng)?;
            }
            d
        }
        FusionMechanism::DeepPrefix => {
            add_affine(
                &mut store,
                "prefix_proj",
                spec.image_dim,
                cfg.visual_prefix_len * d,
                rng,
            )?;
            for b in 0..cfg.block_count() {
                add_block(&mut store, &format!("block{b}"), d, cfg.hidden_dim, rng)?;
            }
            d
        }
    };
    add_affine(&mut store, "cls.fc1", classifier_in, cfg.hidden_dim, rng)?;
    add_affine(&mut store, "cls.fc2", cfg.hidden_dim, cfg.num_classes, rng)?;
    Ok(store)
}

fn add_affine<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(), FusionError> {
    store.insert(format!("{name}.w"), xavier_uniform(fan_in, fan_out, rng))?;
    store.insert(format!("{name}.b"), Tensor2D::zeros(1, fan_out))?;
    Ok(())
}

fn add_block<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(), FusionError> {
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{prefix}.attn.{w}"), xavier_uniform(d, d, rng))?;
    }
    store.insert(
        format!("{prefix}.ln1.gain"),
        Tensor2D::filled(1, d, T::one()),
    )?;
    store.insert(format!("{prefix}.ln1.shift"), Tensor2D::zeros(1, d))?;
    add_affine(store, &format!("{prefix}.ffn.fc1"), d, hidden, rng)?;
    add_affine(store, &format!("{prefix}.ffn.fc2"), hidden, d, rng)?;
    store.insert(
        format!("{prefix}.ln2.gain"),
        Tensor2D::filled(1, d, T::one()),
    )?;
    store.insert(format!("{prefix}.ln2.shift"), Tensor2D::zeros(1, d))?;
    Ok(())
}

fn affine<T: Real>(
    p: &ParamStore<T>,
    name: &str,
    x: &Tensor2D<T>,
) -> Result<Tensor2D<T>, FusionError> {
    Ok(dense_affine(
        x,
        p.value(&format!("{name}.w"))?,
        p.value(&format!("{name}.b"))?,
    )?)
}

fn affine_back<T: Real>(
    p: &ParamStore<T>,
    name: &str,
    x: &Tensor2D<T>,
    dout: &Tensor2D<T>,
    grads: &mut Grads<T>,
) -> Result<Tensor2D<T>, FusionError> {
    let g = dense_affine_backward(x, p.value(&format!("{name}.w"))?, dout)?;
    grads.push((format!("{name}.w"), g.dw));
    grads.push((format!("{name}.b"), g.db));
    Ok(g.dx)
}

fn maybe_dropout<T: Real>(
    x: Tensor2D<T>,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> (Tensor2D<T>, Option<Tensor2D<T>>) {
    match rng.as_deref_mut() {
        Some(r) if rate > 0.0 => {
            let (out, mask) = dropout(&x, rate, r);
            (out, Some(mask))
        }
        _ => (x, None),
    }
}

fn check_dim(what: &'static str, expected: usize, actual: usize) -> Result<(), FusionError> {
    if expected != actual {
        return Err(FusionError::DimMismatch {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

fn classifier_forward<T: Real>(
    spec: &HeadSpec,
    p: &ParamStore<T>,
    z: Tensor2D<T>,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<(Tensor2D<T>, ClassifierCache<T>), FusionError> {
    let u = affine(p, "cls.fc1", &z)?;
    let (g, mask) = maybe_dropout(gelu(&u), spec.config.dropout, rng);
    let logits = affine(p, "cls.fc2", &g)?;
    Ok((logits, ClassifierCache { z, u, g, mask }))
}

fn classifier_backward<T: Real>(
    p: &ParamStore<T>,
    cache: &ClassifierCache<T>,
    dlogits: &Tensor2D<T>,
    grads: &mut Grads<T>,
) -> Result<Tensor2D<T>, FusionError> {
    let mut dg = affine_back(p, "cls.fc2", &cache.g, dlogits, grads)?;
    if let Some(mask) = &cache.mask {
        dg = dropout_backward(mask, &dg)?;
    }
    let du = gelu_backward(&cache.u, &dg)?;
    affine_back(p, "cls.fc1", &cache.z, &du, grads)
}

fn block_forward<T: Real>(
    spec: &HeadSpec,
    p: &ParamStore<T>,
    prefix: &str,
    input: &Tensor2D<T>,
    kv: Option<&Tensor2D<T>>,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<(Tensor2D<T>, Tensor2D<T>, BlockCache<T>), FusionError> {
    let cfg = &spec.config;
    let eps = T::lit(cfg.layer_norm_eps);
    let w = AttentionWeights::from_store(p, &format!("{prefix}.attn"))?;
    let (a, maps, attn) = multi_head_attention(input, kv.unwrap_or(input), w, cfg.heads)?;
    let r1 = input.add(&a)?;
    let (h1, ln1) = layer_norm(
        &r1,
        p.value(&format!("{prefix}.ln1.gain"))?,
        p.value(&format!("{prefix}.ln1.shift"))?,
        eps,
    )?;
    let u = affine(p, &format!("{prefix}.ffn.fc1"), &h1)?;
    let (g, mask) = maybe_dropout(gelu(&u), cfg.dropout, rng);
    let f = affine(p, &format!("{prefix}.ffn.fc2"), &g)?;
    let r2 = h1.add(&f)?;
    let (h2, ln2) = layer_norm(
        &r2,
        p.value(&format!("{prefix}.ln2.gain"))?,
        p.value(&format!("{prefix}.ln2.shift"))?,
        eps,
    )?;
    let cache = BlockCache {
        self_attention: kv.is_none(),
        attn,
        maps,
        ln1,
        h1,
        u,
        g,
        mask,
        ln2,
    };
    Ok((h2, a, cache))
}

/// Returns the gradient with respect to the block input and, for
/// cross-attention, with respect to the key/value input.
fn block_backward<T: Real>(
    p: &ParamStore<T>,
    prefix: &str,
    cache: &BlockCache<T>,
    dh2: &Tensor2D<T>,
    grads: &mut Grads<T>,
) -> Result<(Tensor2D<T>, Option<Tensor2D<T>>), FusionError> {
    let ln2 = layer_norm_backward(&cache.ln2, p.value(&format!("{prefix}.ln2.gain"))?, dh2)?;
    grads.push((format!("{prefix}.ln2.gain"), ln2.dgain));
    grads.push((format!("{prefix}.ln2.shift"), ln2.dshift));
    let dr2 = ln2.dx;
    let mut dg = affine_back(p, &format!("{prefix}.ffn.fc2"), &cache.g, &dr2, grads)?;
    if let Some(mask) = &cache.mask {
        dg = dropout_backward(mask, &dg)?;
    }
    let du = gelu_backward(&cache.u, &dg)?;
    let dh1_ffn = affine_back(p, &format!("{prefix}.ffn.fc1"), &cache.h1, &du, grads)?;
    let dh1 = dr2.add(&dh1_ffn)?;
    let ln1 = layer_norm_backward(&cache.ln1, p.value(&format!("{prefix}.ln1.gain"))?, &dh1)?;
    grads.push((format!("{prefix}.ln1.gain"), ln1.dgain));
    grads.push((format!("{prefix}.ln1.shift"), ln1.dshift));
    let dr1 = ln1.dx;
    let w = AttentionWeights::from_store(p, &format!("{prefix}.attn"))?;
    let ag = multi_head_attention_backward(&cache.attn, &cache.maps, w, &dr1)?;
    grads.push((format!("{prefix}.attn.wq"), ag.dwq));
    grads.push((format!("{prefix}.attn.wk"), ag.dwk));
    grads.push((format!("{prefix}.attn.wv"), ag.dwv));
    grads.push((format!("{prefix}.attn.wo"), ag.dwo));
    let mut dinput = dr1.add(&ag.dq_in)?;
    if cache.self_attention {
        dinput.add_assign(&ag.dkv_in)?;
        Ok((dinput, None))
    } else {
        Ok((dinput, Some(ag.dkv_in)))
    }
}

pub(super) fn forward<T: Real>(
    spec: &HeadSpec,
    p: &ParamStore<T>,
    pack: &PreparedPack<T>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(ForwardOutput<T>, ForwardCache<T>), FusionError> {
    let cfg = &spec.config;
    check_dim("text", spec.text_dim, pack.text_pooled.cols())?;
    check_dim("text tokens", spec.text_dim, pack.text_tokens.cols())?;
    check_dim("image", spec.image_dim, pack.image_pooled.cols())?;
    check_dim("image tokens", spec.image_dim, pack.image_tokens.cols())?;
    let rng = &mut rng;
    match cfg.mechanism {
        FusionMechanism::Concat => {
            let t = affine(p, "text_proj", &pack.text_pooled)?;
            let v = affine(p, "image_proj", &pack.image_pooled)?;
            let (logits, cls) = classifier_forward(spec, p, t.hstack(&v)?, rng)?;
            Ok((
                ForwardOutput {
                    logits,
                    attention: None,
                    visual_summary: None,
                },
                ForwardCache {
                    inner: CacheKind::Concat {
                        text_in: pack.text_pooled.clone(),
                        image_in: pack.image_pooled.clone(),
                        cls,
                    },
                },
            ))
        }
        FusionMechanism::CrossAttention => {
            let mut h = affine(p, "text_proj", &pack.text_tokens)?;
            let z = affine(p, "image_proj", &pack.image_tokens)?;
            let mut blocks = Vec::with_capacity(cfg.block_count());
            let mut layers = Vec::with_capacity(cfg.block_count());
            let mut summary = None;
            for b in 0..cfg.block_count() {
                let (out, attended, cache) =
                    block_forward(spec, p, &format!("block{b}"), &h, Some(&z), rng)?;
                if summary.is_none() {
                    summary = Some(attended);
                }
                layers.push(cache.maps.clone());
                blocks.push(cache);
                h = out;
            }
            let (logits, cls) = classifier_forward(spec, p, mean_rows(&h), rng)?;
            Ok((
                ForwardOutput {
                    logits,
                    attention: Some(AttentionBundle {
                        layout: AttentionLayout::Cross {
                            text_len: pack.text_tokens.rows(),
                            image_len: pack.image_tokens.rows(),
                        },
                        layers,
                    }),
                    visual_summary: summary,
                },
                ForwardCache {
                    inner: CacheKind::Cross {
                        text_in: pack.text_tokens.clone(),
                        image_in: pack.image_tokens.clone(),
                        blocks,
                        cls,
                    },
                },
            ))
        }
        FusionMechanism::DeepPrefix => {
            let k = cfg.visual_prefix_len;
            let prefix = affine(p, "prefix_proj", &pack.image_pooled)?.reshape(k, cfg.model_dim)?;
            let text = affine(p, "text_proj", &pack.text_tokens)?;
            let mut h = prefix.vstack(&text)?;
            let mut blocks = Vec::with_capacity(cfg.block_count());
            let mut layers = Vec::with_capacity(cfg.block_count());
            for b in 0..cfg.block_count() {
                let (out, _, cache) = block_forward(spec, p, &format!("block{b}"), &h, None, rng)?;
                layers.push(cache.maps.clone());
                blocks.push(cache);
                h = out;
            }
            let (logits, cls) = classifier_forward(spec, p, mean_rows(&h), rng)?;
            Ok((
                ForwardOutput {
                    logits,
                    attention: Some(AttentionBundle {
                        layout: AttentionLayout::Prefix {
                            prefix_len: k,
                            text_len: pack.text_tokens.rows(),
                        },
                        layers,
                    }),
                    visual_summary: None,
                },
                ForwardCache {
                    inner: CacheKind::Prefix {
                        text_in: pack.text_tokens.clone(),
                        image_in: pack.image_pooled.clone(),
                        blocks,
                        cls,
                    },
                },
            ))
        }
    }
}

pub(super) fn backward<T: Real>(
    spec: &HeadSpec,
    p: &ParamStore<T>,
    cache: &ForwardCache<T>,
    dlogits: &Tensor2D<T>,
) -> Result<Grads<T>, FusionError> {
    let mut grads = Vec::new();
    match &cache.inner {
        CacheKind::Concat {
            text_in,
            image_in,
            cls,
        } => {
            let dz = classifier_backward(p, cls, dlogits, &mut grads)?;
            let d = spec.config.model_dim;
            affine_back(p, "text_proj", text_in, &dz.slice_cols(0, d), &mut grads)?;
            affine_back(
                p,
                "image_proj",
                image_in,
                &dz.slice_cols(d, 2 * d),
                &mut grads,
            )?;
        }
        CacheKind::Cross {
            text_in,
            image_in,
            blocks,
            cls,
        } => {
            let dpooled = classifier_backward(p, cls, dlogits, &mut grads)?;
            let mut dh = mean_rows_backward(text_in.rows(), &dpooled);
            let mut dz = Tensor2D::zeros(image_in.rows(), spec.config.model_dim);
            for (b, block) in blocks.iter().enumerate().rev() {
                let (dinput, dkv) =
                    block_backward(p, &format!("block{b}"), block, &dh, &mut grads)?;
                if let Some(dkv) = dkv {
                    dz.add_assign(&dkv)?;
                }
                dh = dinput;
            }
            affine_back(p, "text_proj", text_in, &dh, &mut grads)?;
            affine_back(p, "image_proj", image_in, &dz, &mut grads)?;
        }
        CacheKind::Prefix {
            text_in,
            image_in,
            blocks,
            cls,
        } => {
            let k = spec.config.visual_prefix_len;
            let d = spec.config.model_dim;
            let dpooled = classifier_backward(p, cls, dlogits, &mut grads)?;
            let mut dh = mean_rows_backward(k + text_in.rows(), &dpooled);
            for (b, block) in blocks.iter().enumerate().rev() {
                dh = block_backward(p, &format!("block{b}"), block, &dh, &mut grads)?.0;
            }
            let dprefix = dh.slice_rows(0, k).reshape(1, k * d)?;
            let dtext = dh.slice_rows(k, dh.rows());
            affine_back(p, "prefix_proj", image_in, &dprefix, &mut grads)?;
            affine_back(p, "text_proj", text_in, &dtext, &mut grads)?;
        }
    }
    Ok(grads)
}

pub(super) fn batch_loss_and_grad<T: Real>(
    spec: &HeadSpec,
    params: &mut ParamStore<T>,
    batch: &[&PreparedPack<T>],
    labels: &[usize],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<T, FusionError> {
    if batch.is_empty() {
        return Err(FusionError::EmptySequence("batch"));
    }
    params.zero_grads();
    let mut logits = Tensor2D::zeros(batch.len(), spec.config.num_classes);
    let mut caches = Vec::with_capacity(batch.len());
    for (i, pack) in batch.iter().enumerate() {
        let (out, cache) = forward(spec, params, pack, rng.as_deref_mut())?;
        logits.row_mut(i).copy_from_slice(out.logits.row(0));
        caches.push(cache);
    }
    let (loss, dlogits) = cross_entropy(&logits, labels)?;
    for (i, cache) in caches.iter().enumerate() {
        let grads = backward(spec, params, cache, &dlogits.slice_rows(i, i + 1))?;
        for (name, g) in grads {
            params.accumulate(&name, &g)?;
        }
    }
    Ok(loss)
}
