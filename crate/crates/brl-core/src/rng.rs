//! Splittable random-number streams.
//!
//! Every stochastic routine in the crate draws from an [`RngStream`], a
//! ChaCha-based generator addressed by `(master seed, stream id)`.  Streams
//! are derived, never shared: each Monte-Carlo replica, each pool member and
//! generation, and each tree vertex (via its path word) gets its own stream.
//! The values drawn from a stream are a pure function of `(seed, stream id,
//! draw counter)`, so results do not depend on the order in which different
//! streams happen to be consumed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// SplitMix64 step; used to expand seeds and to mix stream identifiers.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines a parent stream id with a child tag into a fresh stream id.
fn mix(parent: u64, tag: u64) -> u64 {
    splitmix64(parent ^ splitmix64(tag.wrapping_add(0x6a09_e667_f3bc_c909)))
}

/// A deterministic, splittable random stream.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    counter: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    /// Root stream for a master seed.
    pub fn from_seed(seed: u64) -> Self {
        RngStream::new(seed, 0)
    }

    /// Stream addressed by `(seed, stream id)`.
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        let mut s = splitmix64(seed);
        for chunk in key.chunks_exact_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        RngStream {
            seed,
            stream,
            counter: 0,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// Number of draws made so far.
    pub fn position(&self) -> u64 {
        self.counter
    }

    /// Child stream tagged by an integer; derivation is independent of any
    /// draws made from `self`.
    pub fn derive(&self, tag: u64) -> RngStream {
        RngStream::new(self.seed, mix(self.stream, tag))
    }

    /// Stream addressed by a tree path word (child indices from the root).
    /// Distinct words, including prefixes of one another, map to distinct
    /// streams.
    pub fn for_path(&self, path: &[u32]) -> RngStream {
        let mut id = mix(self.stream, 0xcafe);
        for &step in path {
            id = mix(id, 1 + step as u64);
        }
        RngStream::new(self.seed, id)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.rng.gen::<u64>()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.counter += 1;
        StandardNormal.sample(&mut self.rng)
    }

    /// Centered Cauchy draw with the given scale.
    pub fn cauchy(&mut self, scale: f64) -> f64 {
        self.counter += 1;
        let u: f64 = self.rng.gen::<f64>() - 0.5;
        scale * (std::f64::consts::PI * u).tan()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.counter += 1;
        self.rng.gen_range(0..n)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.counter += 1;
        self.rng.gen::<f64>()
    }
}
