//! Seeded, labelled random streams.
//!
//! A stream is keyed by `(seed, label)`; the same key always yields the same
//! sequence. The position inside the stream can be captured and restored so a
//! resumed training run draws exactly the values an uninterrupted run would.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

/// Serializable position of a [`RngStream`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub label: String,
    /// ChaCha word position, stored as a decimal string (u128 does not fit JSON numbers).
    pub word_pos: String,
}

fn key(seed: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"distran-rng-v1");
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>) -> Self {
        let label = label.into();
        let rng = ChaCha8Rng::from_seed(key(seed, &label));
        Self { seed, label, rng }
    }

    /// Child stream with its own key; does not advance `self`.
    pub fn fork(&self, label: &str) -> Self {
        Self::new(self.seed, format!("{}/{}", self.label, label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normals_f32(&mut self, n: usize) -> Vec<f32> {
        (0..n)
            .map(|_| {
                let v: f32 = StandardNormal.sample(&mut self.rng);
                v
            })
            .collect()
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            label: self.label.clone(),
            word_pos: self.rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(state: &RngState) -> crate::Result<Self> {
        let pos: u128 = state.word_pos.parse().map_err(|_| {
            crate::Error::invalid(format!("bad rng word position `{}`", state.word_pos))
        })?;
        let mut s = Self::new(state.seed, state.label.clone());
        s.rng.set_word_pos(pos);
        Ok(s)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
