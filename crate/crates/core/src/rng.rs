//! Seedable, splittable pseudorandom streams.
//!
//! Every stochastic operation in the crate takes an [`RngStream`] explicitly.
//! Streams are derived from a root seed by name (`data`, `init`, `train`,
//! `sample`) so each component can be reproduced on its own, and can be
//! forked by index for per-item or per-worker determinism.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn derive_seed(seed: [u8; 32], salt: u64) -> [u8; 32] {
    let mut out = [0u8; 32];
    for (i, chunk) in seed.chunks_exact(8).enumerate() {
        let word = u64::from_le_bytes(chunk.try_into().unwrap());
        let mixed = splitmix64(word ^ splitmix64(salt.wrapping_add(i as u64)));
        out[i * 8..(i + 1) * 8].copy_from_slice(&mixed.to_le_bytes());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct RngStream {
    rng: ChaCha12Rng,
}

/// Serializable position of a stream, used in checkpoints and diagnostics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub key: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// Named sub-stream of a root seed.
    pub fn named(seed: u64, name: &str) -> Self {
        Self::new(splitmix64(seed) ^ fnv1a(name))
    }

    /// Child stream keyed by `name`; does not advance `self`.
    pub fn child(&self, name: &str) -> Self {
        Self {
            rng: ChaCha12Rng::from_seed(derive_seed(self.rng.get_seed(), fnv1a(name))),
        }
    }

    /// Child stream keyed by an index; does not advance `self`.
    pub fn fork(&self, index: u64) -> Self {
        Self {
            rng: ChaCha12Rng::from_seed(derive_seed(
                self.rng.get_seed(),
                splitmix64(index ^ 0xA5A5),
            )),
        }
    }

    /// Draws a fresh independent stream, advancing `self`.
    pub fn split(&mut self) -> Self {
        let mut seed = [0u8; 32];
        self.rng.fill_bytes(&mut seed);
        Self {
            rng: ChaCha12Rng::from_seed(seed),
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn state(&self) -> RngState {
        let key = self
            .rng
            .get_seed()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        RngState {
            key,
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> Result<Self> {
        let bad = |what: &str| Error::InvalidArgument(format!("rng state: bad {what}"));
        if state.key.len() != 64 {
            return Err(bad("key length"));
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&state.key[2 * i..2 * i + 2], 16).map_err(|_| bad("key"))?;
        }
        let mut rng = ChaCha12Rng::from_seed(seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(
            state
                .word_pos
                .parse::<u128>()
                .map_err(|_| bad("word_pos"))?,
        );
        Ok(Self { rng })
    }
}
