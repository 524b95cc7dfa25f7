//! Deterministic random streams.
//!
//! Everything random in the pipeline draws from ChaCha8 seeded here, so a run is a
//! pure function of its seed. Independent consumers get separate ChaCha streams
//! rather than sharing one generator.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// A stream that is independent of `seeded_rng(seed)` and of every other `tag`.
pub fn substream(seed: u64, tag: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(tag.wrapping_add(1));
    rng
}

/// Mixes several integers into one seed (splitmix64 finalizer).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
