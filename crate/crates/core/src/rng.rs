//! Seed derivation and simplex sampling.
//!
//! Every stochastic component takes an explicit seed; parallel and serial
//! runs agree because worker seeds are derived from (master seed, index)
//! rather than from a shared mutable generator.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; decorrelates nearby seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic child seed for worker `index` of a run seeded by `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index.wrapping_add(0x51ed_270b)))
}

/// The crate-wide deterministic generator.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform sample on the standard `d-1` simplex via normalized exponential
/// draws (flat Dirichlet).
pub fn sample_simplex<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    assert!(d >= 1, "simplex dimension must be at least 1");
    let mut v: Vec<f64> = (0..d)
        .map(|_| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -u.ln()
        })
        .collect();
    let total: f64 = v.iter().sum();
    for x in &mut v {
        *x /= total;
    }
    v
}

/// Standard normal draw (Box-Muller; two uniforms per call keeps the stream
/// layout independent of caller batching).
pub fn sample_standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
