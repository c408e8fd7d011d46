//! Seeded random streams.
//!
//! Every random draw in the crate goes through [`Pcg64`] seeded with
//! `seed_from_u64`, so outputs are reproducible across platforms. Independent
//! streams (per epoch, per channel, per layer) are derived with [`derive_seed`]
//! so that adding or removing one consumer never shifts another's draws.

use rand::SeedableRng;
pub use rand_pcg::Pcg64;

pub fn seeded(seed: u64) -> Pcg64 {
    Pcg64::seed_from_u64(seed)
}

/// Mixes a base seed with a list of stream tags (splitmix64 finalizer).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        h = splitmix(h ^ splitmix(t.wrapping_add(0xD1B5_4A32_D192_ED03)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
