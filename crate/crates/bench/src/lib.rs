//! Input builders shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthsight_core::fusion::PreparedPack;
use synthsight_core::tensorcore::Tensor2D;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2D<f32> {
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Tensor2D::from_vec(rows, cols, data).expect("shape matches")
}

/// `m` text tokens and `n` image tokens of width `dim`.
pub fn pack(m: usize, n: usize, dim: usize, rng: &mut ChaCha8Rng) -> PreparedPack<f32> {
    PreparedPack {
        text_tokens: random(m, dim, rng),
        image_tokens: random(n, dim, rng),
        text_pooled: random(1, dim, rng),
        image_pooled: random(1, dim, rng),
    }
}
