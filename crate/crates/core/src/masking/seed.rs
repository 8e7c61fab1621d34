//! Per-sample seeding: FNV-1a 64 over the UTF-8 key, splitmix64 stream,
//! Fisher–Yates shuffle.
//!
//! Every step is integer arithmetic with wrapping semantics, so the same
//! key gives the same permutation on every platform.

use serde::{Deserialize, Serialize};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ b as u64).wrapping_mul(FNV_PRIME)
    })
}

/// A sample key and the seed derived from it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSeed {
    pub key: String,
    pub seed: u64,
}

impl SampleSeed {
    pub fn from_key(key: impl Into<String>) -> Self {
        let key = key.into();
        let seed = fnv1a64(key.as_bytes());
        Self { key, seed }
    }

    /// Seed for `key` in a given training epoch; epoch 0 is the plain key.
    pub fn for_epoch(key: &str, epoch: usize) -> Self {
        if epoch == 0 {
            Self::from_key(key)
        } else {
            Self::from_key(format!("{key}#{epoch}"))
        }
    }
}

/// splitmix64 generator.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Integer in `0..bound` by 64×64→128 multiply-high.
    pub fn below(&mut self, bound: usize) -> usize {
        ((self.next_u64() as u128 * bound as u128) >> 64) as usize
    }
}

/// Fisher–Yates permutation of `0..n`, swapping from the top index down.
pub fn permutation(seed: u64, n: usize) -> Vec<usize> {
    let mut rng = SplitMix64::new(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i + 1);
        perm.swap(i, j);
    }
    perm
}
