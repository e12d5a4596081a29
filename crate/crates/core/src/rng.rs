//! Counter-based random streams.
//!
//! An [`RngStream`] is a plain `(seed, stream_id)` pair. Every draw builds a
//! fresh ChaCha8 generator keyed by the seed and positioned on the stream, so
//! the values depend only on the pair and never on call order or thread. Child
//! streams are derived by hashing a tag into the stream id, which lets
//! Monte-Carlo samples, layers and training steps each own an independent
//! stream without any shared mutable state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Child stream identified by `tag`. Distinct tags give distinct streams.
    pub fn derive(&self, tag: u64) -> Self {
        Self {
            seed: self.seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(tag.wrapping_add(0x5851_f42d_4c95_7f2d))),
        }
    }

    /// Chain of [`derive`](Self::derive) calls, one per tag.
    pub fn derive_path(&self, tags: &[u64]) -> Self {
        tags.iter().fold(*self, |s, &t| s.derive(t))
    }

    /// A generator positioned at the start of this stream.
    pub fn generator(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// `n` i.i.d. standard normal draws.
    pub fn normals(&self, n: usize) -> Vec<f64> {
        let mut rng = self.generator();
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    /// `n` i.i.d. uniform draws on `[0, 1)`.
    pub fn uniforms(&self, n: usize) -> Vec<f64> {
        let mut rng = self.generator();
        (0..n).map(|_| rng.random::<f64>()).collect()
    }
}
