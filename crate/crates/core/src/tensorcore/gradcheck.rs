use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{ParamStore, TensorError};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference half step.
    pub step: f64,
    /// Coordinates checked per tensor; smaller tensors are checked exhaustively.
    pub coords_per_tensor: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_tensor: 50,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences.
///
/// `f` must evaluate the loss at the current parameter values and write the
/// analytic gradient into the store's gradient slots (zeroing them first).
/// It is called twice at the base point to detect non-determinism.
pub fn grad_check<F>(
    params: &mut ParamStore<f64>,
    mut f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut ParamStore<f64>) -> Result<f64, TensorError>,
{
    let base = f(params)?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    let again = f(params)?;
    let analytic_again: Vec<Vec<f64>> =
        params.iter().map(|(_, p)| p.grad.data().to_vec()).collect();
    if base.to_bits() != again.to_bits() || analytic != analytic_again {
        return Err(TensorError::NonDeterministic);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut checks = Vec::with_capacity(names.len());
    for (name, grads) in names.iter().zip(&analytic) {
        let len = grads.len();
        let coords: Vec<usize> = if len <= cfg.coords_per_tensor {
            (0..len).collect()
        } else {
            let mut idx = sample(&mut rng, len, cfg.coords_per_tensor).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut worst = ParamCheck {
            name: name.clone(),
            coords_checked: coords.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic_at_worst: 0.0,
            numeric_at_worst: 0.0,
        };
        for &i in &coords {
            let original = params.value(name)?.data()[i];
            params.value_mut(name)?.data_mut()[i] = original + cfg.step;
            let plus = f(params)?;
            params.value_mut(name)?.data_mut()[i] = original - cfg.step;
            let minus = f(params)?;
            params.value_mut(name)?.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = relative_error(grads[i], numeric);
            if err > worst.max_rel_error || worst.coords_checked == 0 {
                worst.max_rel_error = err;
                worst.worst_index = i;
                worst.analytic_at_worst = grads[i];
                worst.numeric_at_worst = numeric;
            }
        }
        checks.push(worst);
    }
    // Leave the analytic gradient in place for callers that inspect it.
    f(params)?;
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params: checks,
        max_rel_error,
        tolerance: cfg.tolerance,
        passed: max_rel_error <= cfg.tolerance,
    })
}
