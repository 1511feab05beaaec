use super::ops::{softmax_rows, softmax_rows_backward};
use super::{ParamStore, Real, Tensor2D, TensorError};

/// Borrowed projection matrices of one attention block, each `d x d`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights<'a, T> {
    pub wq: &'a Tensor2D<T>,
    pub wk: &'a Tensor2D<T>,
    pub wv: &'a Tensor2D<T>,
    pub wo: &'a Tensor2D<T>,
}

impl<'a, T: Real> AttentionWeights<'a, T> {
    /// Looks up `{prefix}.wq`, `.wk`, `.wv`, `.wo`.
    pub fn from_store(store: &'a ParamStore<T>, prefix: &str) -> Result<Self, TensorError> {
        Ok(Self {
            wq: store.value(&format!("{prefix}.wq"))?,
            wk: store.value(&format!("{prefix}.wk"))?,
            wv: store.value(&format!("{prefix}.wv"))?,
            wo: store.value(&format!("{prefix}.wo"))?,
        })
    }
}

/// Post-softmax weights, one `m x n` map per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps<T> {
    pub heads: Vec<Tensor2D<T>>,
}

impl<T: Real> AttentionMaps<T> {
    /// Element-wise mean over heads.
    pub fn head_average(&self) -> Tensor2D<T> {
        let mut acc = self.heads[0].clone();
        for h in &self.heads[1..] {
            acc.add_assign(h).expect("heads share a shape");
        }
        acc.scale(T::one() / T::lit(self.heads.len() as f64))
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    q_in: Tensor2D<T>,
    kv_in: Tensor2D<T>,
    q: Tensor2D<T>,
    k: Tensor2D<T>,
    v: Tensor2D<T>,
    context: Tensor2D<T>,
    heads: usize,
    scale: T,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads<T> {
    pub dq_in: Tensor2D<T>,
    pub dkv_in: Tensor2D<T>,
    pub dwq: Tensor2D<T>,
    pub dwk: Tensor2D<T>,
    pub dwv: Tensor2D<T>,
    pub dwo: Tensor2D<T>,
}

/// Scaled dot-product attention with `heads` heads; queries come from
/// `q_in` (`m x d`), keys and values from `kv_in` (`n x d`). Returns the
/// `m x d` output, the per-head maps, and the backward cache.
pub fn multi_head_attention<T: Real>(
    q_in: &Tensor2D<T>,
    kv_in: &Tensor2D<T>,
    w: AttentionWeights<'_, T>,
    heads: usize,
) -> Result<(Tensor2D<T>, AttentionMaps<T>, AttentionCache<T>), TensorError> {
    let d = q_in.cols();
    if kv_in.cols() != d {
        return Err(TensorError::shape(
            "attention inputs",
            q_in.shape(),
            kv_in.shape(),
        ));
    }
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::HeadsDoNotDivide { dim: d, heads });
    }
    for mat in [w.wq, w.wk, w.wv, w.wo] {
        if mat.shape() != (d, d) {
            return Err(TensorError::shape("attention weights", (d, d), mat.shape()));
        }
    }
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let q = q_in.matmul(w.wq)?;
    let k = kv_in.matmul(w.wk)?;
    let v = kv_in.matmul(w.wv)?;
    let mut context = Tensor2D::zeros(q_in.rows(), d);
    let mut maps = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(lo, hi);
        let kh = k.slice_cols(lo, hi);
        let vh = v.slice_cols(lo, hi);
        let scores = qh.matmul_t(&kh)?.scale(scale);
        let probs = softmax_rows(&scores);
        context.write_cols(lo, &probs.matmul(&vh)?);
        maps.push(probs);
    }
    let out = context.matmul(w.wo)?;
    out.debug_check("multi_head_attention");
    let cache = AttentionCache {
        q_in: q_in.clone(),
        kv_in: kv_in.clone(),
        q,
        k,
        v,
        context,
        heads,
        scale,
    };
    Ok((out, AttentionMaps { heads: maps }, cache))
}

pub fn multi_head_attention_backward<T: Real>(
    cache: &AttentionCache<T>,
    maps: &AttentionMaps<T>,
    w: AttentionWeights<'_, T>,
    dout: &Tensor2D<T>,
) -> Result<AttentionGrads<T>, TensorError> {
    let d = cache.q_in.cols();
    let dh = d / cache.heads;
    let dwo = cache.context.t_matmul(dout)?;
    let dcontext = dout.matmul_t(w.wo)?;
    let mut dq = Tensor2D::zeros(cache.q.rows(), d);
    let mut dk = Tensor2D::zeros(cache.k.rows(), d);
    let mut dv = Tensor2D::zeros(cache.v.rows(), d);
    for (h, probs) in maps.heads.iter().enumerate() {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = cache.q.slice_cols(lo, hi);
        let kh = cache.k.slice_cols(lo, hi);
        let vh = cache.v.slice_cols(lo, hi);
        let dctx = dcontext.slice_cols(lo, hi);
        let dprobs = dctx.matmul_t(&vh)?;
        dv.write_cols(lo, &probs.t_matmul(&dctx)?);
        let dscores = softmax_rows_backward(probs, &dprobs)?.scale(cache.scale);
        dq.write_cols(lo, &dscores.matmul(&kh)?);
        dk.write_cols(lo, &dscores.t_matmul(&qh)?);
    }
    let dwq = cache.q_in.t_matmul(&dq)?;
    let dwk = cache.kv_in.t_matmul(&dk)?;
    let dwv = cache.kv_in.t_matmul(&dv)?;
    let dq_in = dq.matmul_t(w.wq)?;
    let mut dkv_in = dk.matmul_t(w.wk)?;
    dkv_in.add_assign(&dv.matmul_t(w.wv)?)?;
    Ok(AttentionGrads {
        dq_in,
        dkv_in,
        dwq,
        dwk,
        dwv,
        dwo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2D<f64> {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor2D::from_vec(rows, cols, data).unwrap()
    }

    struct Fixture {
        wq: Tensor2D<f64>,
        wk: Tensor2D<f64>,
        wv: Tensor2D<f64>,
        wo: Tensor2D<f64>,
    }

    impl Fixture {
        fn new(d: usize, seed: u64) -> Self {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            Self {
                wq: random(d, d, &mut rng),
                wk: random(d, d, &mut rng),
                wv: random(d, d, &mut rng),
                wo: random(d, d, &mut rng),
            }
        }
        fn weights(&self) -> AttentionWeights<'_, f64> {
            AttentionWeights {
                wq: &self.wq,
                wk: &self.wk,
                wv: &self.wv,
                wo: &self.wo,
            }
        }
    }

    #[test]
    fn single_key_returns_value_projection() {
        let fx = Fixture::new(4, 1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let q = random(3, 4, &mut rng);
        let kv = random(1, 4, &mut rng);
        let (out, maps, _) = multi_head_attention(&q, &kv, fx.weights(), 2).unwrap();
        let expected = kv.matmul(&fx.wv).unwrap().matmul(&fx.wo).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert!((out.get(r, c) - expected.get(0, c)).abs() < 1e-12);
            }
        }
        assert!(maps
            .heads
            .iter()
            .all(|m| m.data().iter().all(|&p| p == 1.0)));
    }

    #[test]
    fn rows_of_maps_sum_to_one() {
        let fx = Fixture::new(8, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (_, maps, _) = multi_head_attention(
            &random(5, 8, &mut rng),
            &random(7, 8, &mut rng),
            fx.weights(),
            4,
        )
        .unwrap();
        for m in &maps.heads {
            for r in 0..m.rows() {
                assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn key_permutation_leaves_output_unchanged() {
        let fx = Fixture::new(6, 8);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let q = random(2, 6, &mut rng);
        let kv = random(4, 6, &mut rng);
        let order = [2, 0, 3, 1];
        let (a, maps_a, _) = multi_head_attention(&q, &kv, fx.weights(), 3).unwrap();
        let (b, maps_b, _) =
            multi_head_attention(&q, &kv.permute_rows(&order), fx.weights(), 3).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        for (ma, mb) in maps_a.heads.iter().zip(&maps_b.heads) {
            for r in 0..2 {
                for (j, &src) in order.iter().enumerate() {
                    assert!((mb.get(r, j) - ma.get(r, src)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let fx = Fixture::new(8, 1);
        let x = Tensor2D::zeros(2, 8);
        let err = multi_head_attention(&x, &x, fx.weights(), 3).unwrap_err();
        assert!(matches!(
            err,
            TensorError::HeadsDoNotDivide { dim: 8, heads: 3 }
        ));
    }
}
