//! Deterministic seeding: every random choice in the pipeline flows from an
//! explicit u64 seed, split into independent streams by name so adding a
//! consumer never perturbs existing ones.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type Prng = ChaCha12Rng;

/// Root RNG for a given seed.
pub fn seed_rng(seed: u64) -> Prng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// Derive an independent stream from `seed` keyed by a label and an index.
/// Hash-based so streams are stable regardless of call order.
pub fn split(seed: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn split_rng(seed: u64, label: &str, index: u64) -> Prng {
    seed_rng(split(seed, label, index))
}

/// Uniform index into [0, len).
pub fn rand_index(rng: &mut Prng, len: usize) -> usize {
    rng.gen_range(0..len)
}

pub fn randn2(rng: &mut Prng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub fn randn3(rng: &mut Prng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

pub fn randn_dyn(rng: &mut Prng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.sample(StandardNormal))
}
