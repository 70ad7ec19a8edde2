//! Keyed Brownian increment streams.
//!
//! Every stream is a ChaCha generator whose key packs
//! `(seed, replication, agent, channel)`, so a path depends only on its key
//! and never on the order in which streams are consumed. The common noise
//! `W⁰` uses the reserved agent index [`COMMON`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Agent index reserved for the common noise stream.
pub const COMMON: u64 = u64::MAX;

/// Noise channel of a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    /// Individual state noise `Wⁱ`.
    W,
    /// Individual noise `W̄ⁱ` shared by state and observation.
    WBar,
    /// Common noise `W⁰`.
    W0,
    /// Auxiliary draws such as random test controls.
    Aux,
}

impl Channel {
    fn code(self) -> u64 {
        match self {
            Channel::W => 0,
            Channel::WBar => 1,
            Channel::W0 => 2,
            Channel::Aux => 3,
        }
    }
}

/// Generator for the key `(seed, replication, agent, channel)`.
pub fn stream(seed: u64, replication: u64, agent: u64, channel: Channel) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, v) in [seed, replication, agent, channel.code()].into_iter().enumerate() {
        key[8 * i..8 * (i + 1)].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Brownian increments of dimension `dim` over steps of length `dt`.
///
/// Each increment is the sum of `refinement` independent fine increments of
/// length `dt / refinement`, so streams with the same key and the same
/// finest step produce nested paths at every coarser level.
#[derive(Clone, Debug)]
pub struct Increments {
    rng: ChaCha8Rng,
    dim: usize,
    refinement: usize,
    scale: f64,
}

impl Increments {
    pub fn new(rng: ChaCha8Rng, dim: usize, dt: f64, refinement: usize) -> Self {
        let refinement = refinement.max(1);
        Self {
            rng,
            dim,
            refinement,
            scale: (dt / refinement as f64).sqrt(),
        }
    }

    /// Stream for a key with no refinement.
    pub fn keyed(seed: u64, replication: u64, agent: u64, channel: Channel, dim: usize, dt: f64) -> Self {
        Self::new(stream(seed, replication, agent, channel), dim, dt, 1)
    }

    /// Writes the next increment into `out`.
    pub fn fill(&mut self, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for _ in 0..self.refinement {
            for v in out.iter_mut().take(self.dim) {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                *v += z * self.scale;
            }
        }
    }

    /// Next scalar increment; the stream must have dimension one.
    pub fn next_scalar(&mut self) -> f64 {
        let mut v = [0.0];
        self.fill(&mut v);
        v[0]
    }

    /// The next `steps` increments as a flat row-major buffer.
    pub fn take_path(&mut self, steps: usize) -> Vec<f64> {
        let mut out = vec![0.0; steps * self.dim];
        for chunk in out.chunks_mut(self.dim) {
            self.fill(chunk);
        }
        out
    }
}
