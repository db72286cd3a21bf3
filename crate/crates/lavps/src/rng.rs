//! Deterministic RNG streams.
//!
//! Every source of randomness in the crate is a ChaCha stream derived from a
//! root seed and a path of integer tags. Disjoint paths give statistically
//! independent streams, so independent sampler runs, training loops and
//! benchmark instances can be seeded without coordination while staying
//! byte-reproducible under the same root seed.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// splitmix64 finalizer; used only for seed mixing.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed and a tag path.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    let mut s = splitmix64(root);
    for &tag in path {
        s = splitmix64(s ^ splitmix64(tag));
    }
    s
}

/// A ChaCha stream for the given root seed and tag path.
pub fn stream(root: u64, path: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(root, path))
}

/// Draw a standard-normal vector of length `d`.
pub fn standard_normal(rng: &mut impl Rng, d: usize) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}
