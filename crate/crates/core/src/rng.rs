//! Seeded shuffling with a named, portable algorithm.
//!
//! ChaCha8 keystream (`rand_chacha::ChaCha8Rng::seed_from_u64`) drives a
//! Fisher-Yates pass where the swap index for position `i` is
//! `next_u64() % (i + 1)`. Both pieces are fixed so another implementation
//! can reproduce every subset and split from the recorded seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Algorithm name recorded in manifest summaries and session files.
pub const SHUFFLE_ALGORITHM: &str = "chacha8-seed_from_u64/fisher-yates-mod";

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Shuffles in place, walking from the back.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}

/// Returns a seeded permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, &mut seeded(seed));
    idx
}

/// Uniform draw in `[0, 1)` with 53 bits of precision.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}
