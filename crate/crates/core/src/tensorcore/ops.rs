//! Primitive forward/backward pairs. Each backward takes the upstream
//! gradient and whatever the forward cached, and returns input gradients.

use rand::Rng;

use super::{Real, Tensor2D, TensorError};

/// Gradients of [`dense_affine`].
#[derive(Debug, Clone)]
pub struct AffineGrads<T> {
    pub dx: Tensor2D<T>,
    pub dw: Tensor2D<T>,
    pub db: Tensor2D<T>,
}

/// `x W + b`, bias broadcast over rows.
pub fn dense_affine<T: Real>(
    x: &Tensor2D<T>,
    w: &Tensor2D<T>,
    b: &Tensor2D<T>,
) -> Result<Tensor2D<T>, TensorError> {
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(TensorError::shape(
            "dense_affine bias",
            w.shape(),
            b.shape(),
        ));
    }
    let mut out = x.matmul(w)?;
    for r in 0..out.rows() {
        for (o, &bias) in out.row_mut(r).iter_mut().zip(b.data()) {
            *o += bias;
        }
    }
    out.debug_check("dense_affine");
    Ok(out)
}

pub fn dense_affine_backward<T: Real>(
    x: &Tensor2D<T>,
    w: &Tensor2D<T>,
    dout: &Tensor2D<T>,
) -> Result<AffineGrads<T>, TensorError> {
    Ok(AffineGrads {
        dx: dout.matmul_t(w)?,
        dw: x.t_matmul(dout)?,
        db: dout.sum_rows(),
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor2D<T>) -> Tensor2D<T> {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out.debug_check("softmax_rows");
    out
}

/// Backward of softmax given its output `y`: `dx = y * (dy - <dy, y>)` per row.
pub fn softmax_rows_backward<T: Real>(
    y: &Tensor2D<T>,
    dy: &Tensor2D<T>,
) -> Result<Tensor2D<T>, TensorError> {
    if y.shape() != dy.shape() {
        return Err(TensorError::shape(
            "softmax_backward",
            y.shape(),
            dy.shape(),
        ));
    }
    let mut dx = Tensor2D::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &g) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *o = yv * (g - dot);
        }
    }
    Ok(dx)
}

/// Values saved by [`layer_norm`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    x_hat: Tensor2D<T>,
    inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormGrads<T> {
    pub dx: Tensor2D<T>,
    pub dgain: Tensor2D<T>,
    pub dshift: Tensor2D<T>,
}

/// Per-row standardization followed by `gain * x_hat + shift`.
pub fn layer_norm<T: Real>(
    x: &Tensor2D<T>,
    gain: &Tensor2D<T>,
    shift: &Tensor2D<T>,
    eps: T,
) -> Result<(Tensor2D<T>, LayerNormCache<T>), TensorError> {
    let d = x.cols();
    if gain.shape() != (1, d) || shift.shape() != (1, d) {
        return Err(TensorError::shape("layer_norm", x.shape(), gain.shape()));
    }
    let n = T::lit(d as f64);
    let mut x_hat = Tensor2D::zeros(x.rows(), d);
    let mut out = Tensor2D::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        inv_std.push(inv);
        for c in 0..d {
            let h = (row[c] - mean) * inv;
            x_hat.set(r, c, h);
            out.set(r, c, gain.data()[c] * h + shift.data()[c]);
        }
    }
    out.debug_check("layer_norm");
    Ok((out, LayerNormCache { x_hat, inv_std }))
}

pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gain: &Tensor2D<T>,
    dy: &Tensor2D<T>,
) -> Result<LayerNormGrads<T>, TensorError> {
    let x_hat = &cache.x_hat;
    if x_hat.shape() != dy.shape() {
        return Err(TensorError::shape(
            "layer_norm_backward",
            x_hat.shape(),
            dy.shape(),
        ));
    }
    let d = x_hat.cols();
    let n = T::lit(d as f64);
    let mut dx = Tensor2D::zeros(x_hat.rows(), d);
    let mut dgain = Tensor2D::zeros(1, d);
    let mut dshift = Tensor2D::zeros(1, d);
    let mut dxh = vec![T::zero(); d];
    for r in 0..x_hat.rows() {
        let xh = x_hat.row(r);
        let g = dy.row(r);
        for c in 0..d {
            dgain.data_mut()[c] += g[c] * xh[c];
            dshift.data_mut()[c] += g[c];
            dxh[c] = g[c] * gain.data()[c];
        }
        let sum_dxh: T = dxh.iter().copied().sum();
        let sum_dxh_xh: T = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        let scale = cache.inv_std[r] / n;
        for c in 0..d {
            dx.set(r, c, scale * (n * dxh[c] - sum_dxh - xh[c] * sum_dxh_xh));
        }
    }
    Ok(LayerNormGrads { dx, dgain, dshift })
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation. Smooth everywhere, which keeps finite
/// differences well-behaved.
pub fn gelu<T: Real>(x: &Tensor2D<T>) -> Tensor2D<T> {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    x.map(|v| half * v * (T::one() + (k * (v + c * v * v * v)).tanh()))
}

pub fn gelu_backward<T: Real>(
    x: &Tensor2D<T>,
    dy: &Tensor2D<T>,
) -> Result<Tensor2D<T>, TensorError> {
    if x.shape() != dy.shape() {
        return Err(TensorError::shape("gelu_backward", x.shape(), dy.shape()));
    }
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        let t = (k * (v + c * v * v * v)).tanh();
        let deriv = half * (T::one() + t)
            + half * v * (T::one() - t * t) * k * (T::one() + three * c * v * v);
        *g *= deriv;
    }
    Ok(dx)
}

/// Mean over rows, `n x d -> 1 x d`.
pub fn mean_rows<T: Real>(x: &Tensor2D<T>) -> Tensor2D<T> {
    x.sum_rows().scale(T::one() / T::lit(x.rows() as f64))
}

pub fn mean_rows_backward<T: Real>(rows: usize, dy: &Tensor2D<T>) -> Tensor2D<T> {
    let inv = T::one() / T::lit(rows as f64);
    let mut dx = Tensor2D::zeros(rows, dy.cols());
    for r in 0..rows {
        for (o, &g) in dx.row_mut(r).iter_mut().zip(dy.data()) {
            *o = g * inv;
        }
    }
    dx
}

/// Inverted dropout. Returns the output and the scaled keep-mask, which is
/// also what the backward multiplies by.
pub fn dropout<T: Real, R: Rng + ?Sized>(
    x: &Tensor2D<T>,
    rate: f64,
    rng: &mut R,
) -> (Tensor2D<T>, Tensor2D<T>) {
    let keep = T::lit(1.0 / (1.0 - rate));
    let mut mask = Tensor2D::zeros(x.rows(), x.cols());
    for m in mask.data_mut() {
        if rng.random::<f64>() >= rate {
            *m = keep;
        }
    }
    let out = x.hadamard(&mask).expect("same shape");
    (out, mask)
}

pub fn dropout_backward<T: Real>(
    mask: &Tensor2D<T>,
    dy: &Tensor2D<T>,
) -> Result<Tensor2D<T>, TensorError> {
    dy.hadamard(mask)
}
