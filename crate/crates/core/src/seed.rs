//! Deterministic seed derivation.
//!
//! Every random choice in the pipeline (scene noise, planted outliers,
//! subsampling, pyramid construction) draws from a [`rand_chacha::ChaCha8Rng`]
//! seeded through [`derive_seed`], so one base seed reproduces an entire run
//! byte for byte. Stage tags keep the streams independent: the same base seed
//! never feeds two stages the same state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the given bytes; stable across platforms and releases. Also
/// used to fingerprint resolved configurations in run manifests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

/// splitmix64 finalizer; spreads low-entropy seeds over the full state space.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a stage seed from a base seed and a stage tag.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    splitmix64(base ^ fnv1a64(tag.as_bytes()))
}

/// RNG for a pipeline stage.
pub fn stage_rng(base: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag))
}
