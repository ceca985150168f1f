//! Seeded test data.

use dconv_core::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `f32` values in `[-0.5, 0.5)`.
pub fn uniform_f32(dims: [usize; 4], seed: u64) -> Tensor4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(dims, |_| rng.random_range(-0.5f32..0.5))
}

/// Uniform `i16` values in `[-256, 255]`.
pub fn uniform_i16(dims: [usize; 4], seed: u64) -> Tensor4<i16> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(dims, |_| rng.random_range(-256i16..=255))
}

/// Derives independent per-stream seeds from one user seed.
pub fn stream_seed(seed: u64, layer: usize, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (layer as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream);
    rng.random()
}
