use super::{Real, Tensor2D, TensorError};

/// Mean softmax cross-entropy over rows and its gradient with respect to
/// the logits, `(softmax - onehot) / n`.
pub fn cross_entropy<T: Real>(
    logits: &Tensor2D<T>,
    labels: &[usize],
) -> Result<(T, Tensor2D<T>), TensorError> {
    let (n, classes) = logits.shape();
    if labels.len() != n {
        return Err(TensorError::LabelCount {
            rows: n,
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::LabelOutOfRange {
            label: bad,
            classes,
        });
    }
    let inv_n = T::one() / T::lit(n as f64);
    let mut grad = Tensor2D::zeros(n, classes);
    let mut total = T::zero();
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum_exp: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        total += log_z - row[label];
        for (c, g) in grad.row_mut(r).iter_mut().enumerate() {
            let p = (row[c] - log_z).exp();
            let target = if c == label { T::one() } else { T::zero() };
            *g = (p - target) * inv_n;
        }
    }
    Ok((total * inv_n, grad))
}
