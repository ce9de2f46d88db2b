//! Deterministic RNG stream derivation and standard-normal helpers.

use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut x = z;
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derive an independent RNG stream keyed by a master seed plus a tag path
/// (e.g. [purpose, subject, draw]). The same key always yields the same
/// stream regardless of thread scheduling.
pub(crate) fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed);
    for &t in tags {
        state = splitmix64(state ^ t);
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// Uniform draw strictly inside (0, 1): 53 random bits plus a half-ulp
/// offset, so inverse-CDF transforms never see an endpoint.
pub(crate) fn open_unit(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
}

fn standard_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal parameters are valid")
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    standard_normal().cdf(x)
}

pub(crate) fn std_normal_icdf(p: f64) -> f64 {
    standard_normal().inverse_cdf(p)
}
