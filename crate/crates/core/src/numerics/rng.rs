use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Real;

/// Portable, seed-stable generator used throughout.
pub type SceneRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SceneRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a label.
pub fn derived(seed: u64, label: u64) -> SceneRng {
    // splitmix64 finaliser
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    seeded(z ^ (z >> 31))
}

pub fn uniform_vec(rng: &mut SceneRng, n: usize, lo: Real, hi: Real) -> Vec<Real> {
    if lo >= hi {
        return vec![lo; n];
    }
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn normal_vec(rng: &mut SceneRng, n: usize) -> Vec<Real> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as Real).collect()
}
