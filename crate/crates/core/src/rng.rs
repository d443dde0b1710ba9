//! Deterministic, splittable randomness keyed by path.
//!
//! A stream is identified by a seed and a 64-bit key; deriving a child mixes
//! a tag into the key. Two streams with the same `(seed, key)` produce the
//! same draws, and children derived with different tags are independent
//! ChaCha streams.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tree::VertexLabel;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h = mix(bytes.len() as u64);
    for chunk in bytes.chunks(8) {
        let mut buf = [0u8; 8];
        buf[..chunk.len()].copy_from_slice(chunk);
        h = mix(h ^ u64::from_le_bytes(buf));
    }
    h
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    key: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_key(seed, 0)
    }

    fn with_key(seed: u64, key: u64) -> Self {
        let mut bytes = [0u8; 32];
        bytes[..8].copy_from_slice(&seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&key.to_le_bytes());
        bytes[16..24].copy_from_slice(&mix(seed ^ mix(key)).to_le_bytes());
        Self {
            seed,
            key,
            rng: ChaCha8Rng::from_seed(bytes),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream for an integer tag (sample index, role, stage).
    pub fn derive(&self, tag: u64) -> Self {
        Self::with_key(self.seed, mix(self.key ^ mix(tag.wrapping_add(0x51))))
    }

    /// Child stream for a named role.
    pub fn derive_named(&self, name: &str) -> Self {
        self.derive(hash_bytes(name.as_bytes()))
    }

    /// Child stream for a vertex; distinct labels give independent streams.
    pub fn split(&self, v: &VertexLabel) -> Self {
        let mut bytes = Vec::with_capacity(v.depth() + 1);
        bytes.push(0xa5);
        bytes.extend_from_slice(v.path());
        self.derive(hash_bytes(&bytes))
    }

    /// Uniform draw in the open interval `(0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Uniform permutation of `1..=n`.
    pub fn permutation(&mut self, n: usize) -> Vec<u8> {
        let mut v: Vec<u8> = (1..=n as u8).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            v.swap(i, j);
        }
        v
    }
}
