//! Deterministic, splittable seed derivation.
//!
//! A replica's generator is addressed by `(master, label, index)`. The label is
//! hashed with 64-bit FNV-1a, mixed into the master seed with SplitMix64, and
//! the index is added in counter mode (`+ index · 0x9E37_79B9_7F4A_7C15`)
//! before a final SplitMix64 round. The resulting `u64` seeds a ChaCha8
//! stream, so results do not depend on platform, thread count or call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed of substream `label[index]` under `master`.
pub fn substream_seed(master: u64, label: &str, index: u64) -> u64 {
    let base = splitmix64(master ^ fnv1a(label));
    splitmix64(base.wrapping_add(index.wrapping_mul(GOLDEN)))
}

pub fn substream_rng(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(master, label, index))
}
