//! Labelled child seeds derived from one master seed.
//!
//! Every random stream in a run is `ChaCha8` seeded from
//! `child_seed(master, stream, index)`, so a session's randomness depends only
//! on its index and the same dataset comes out whether it is built serially
//! or in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn child_seed(master: u64, stream: &str, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ fnv1a(stream)).wrapping_add(splitmix64(index)))
}

pub fn rng_from_seed(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn child_rng(master: u64, stream: &str, index: u64) -> SeededRng {
    rng_from_seed(child_seed(master, stream, index))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_and_indices_differ() {
        let a = child_seed(7, "session", 0);
        assert_eq!(a, child_seed(7, "session", 0));
        assert_ne!(a, child_seed(7, "session", 1));
        assert_ne!(a, child_seed(7, "defense", 0));
        assert_ne!(a, child_seed(8, "session", 0));
    }
}
