//! Seeded randomness.
//!
//! Every stream is a xoshiro256++ generator seeded through SplitMix64
//! (`seed_from_u64`). Bounded integers use Lemire's multiply-shift method with
//! rejection on `next_u64`, and subsets use a partial Fisher-Yates shuffle, so
//! sampled index sequences depend only on the seed and these two algorithms.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Stream = Xoshiro256PlusPlus;

pub fn stream(seed: u64) -> Stream {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the named substream of `root` (e.g. `"dataset"`, `"eval"`).
pub fn substream(root: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    mix(root ^ mix(h))
}

/// Seed of the `index`-th child of `seed`.
pub fn child(seed: u64, index: u64) -> u64 {
    mix(seed ^ mix(index.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

/// Uniform integer in `0..n` (`n > 0`).
pub fn below<R: RngCore + ?Sized>(rng: &mut R, n: u64) -> u64 {
    assert!(n > 0, "empty range");
    let threshold = n.wrapping_neg() % n;
    loop {
        let m = (rng.next_u64() as u128) * (n as u128);
        if (m as u64) >= threshold {
            return (m >> 64) as u64;
        }
    }
}

/// Moves a uniform random `k`-subset of `items` to the front, in sampled order.
pub fn partial_shuffle<T, R: RngCore + ?Sized>(rng: &mut R, items: &mut [T], k: usize) {
    let n = items.len();
    for i in 0..k.min(n) {
        let j = i + below(rng, (n - i) as u64) as usize;
        items.swap(i, j);
    }
}

/// `k` distinct elements of `items` drawn uniformly without replacement.
pub fn choose<T: Clone, R: RngCore + ?Sized>(rng: &mut R, items: &[T], k: usize) -> Vec<T> {
    let mut pool = items.to_vec();
    partial_shuffle(rng, &mut pool, k);
    pool.truncate(k);
    pool
}
