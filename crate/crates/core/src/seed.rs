//! Root-seed splitting.
//!
//! Every random decision in a run flows from one root seed, split into
//! independent child streams by (purpose, counter) through a SplitMix64-style
//! mix. Any child stream can be replayed without running the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purposes are stable strings; hash them into the mix so adding a purpose
/// never shifts existing streams.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn purpose_tag(purpose: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64; // FNV-1a
    for b in purpose.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Clone, Copy, Debug)]
pub struct SeedSplitter {
    root: u64,
}

impl SeedSplitter {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Deterministic child seed for (purpose, counter).
    pub fn child_seed(&self, purpose: &str, counter: u64) -> u64 {
        mix64(self.root ^ mix64(purpose_tag(purpose)) ^ mix64(counter.wrapping_add(0x9e3779b97f4a7c15)))
    }

    /// RNG for (purpose, counter).
    pub fn rng(&self, purpose: &str, counter: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.child_seed(purpose, counter))
    }
}
