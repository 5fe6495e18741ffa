//! Seeded randomness. Every stochastic component draws from a ChaCha stream
//! derived from an explicit seed, never from the OS.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::{Scalar, Tensor};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named purpose, so adding draws to one component
/// never shifts another component's sequence.
pub fn stream(seed: u64, purpose: &str) -> SeededRng {
    let tag = purpose
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    ChaCha8Rng::seed_from_u64(seed ^ tag.rotate_left(17))
}

pub fn normal_tensor<T: Scalar>(rng: &mut SeededRng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::of(z * std)
    })
}

pub fn uniform_tensor<T: Scalar>(rng: &mut SeededRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.gen_range(lo..hi)))
}
