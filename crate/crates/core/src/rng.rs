//! Deterministic random streams.
//!
//! Every stream is identified by a 64-bit key. Child streams are derived from
//! `(key, index)` alone, so a population evaluated on one worker or eight
//! produces the same draws particle for particle.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(key: u64, index: u64) -> u64 {
    splitmix64(splitmix64(key) ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        let key = splitmix64(seed);
        Self {
            key,
            rng: ChaCha8Rng::seed_from_u64(key),
        }
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    /// Child stream determined only by this stream's key and `index`; does not
    /// advance `self`.
    pub fn substream(&self, index: u64) -> RngStream {
        let key = mix(self.key, index);
        RngStream {
            key,
            rng: ChaCha8Rng::seed_from_u64(key),
        }
    }

    /// Child stream keyed by a path of indices, e.g. `(step, particle)`.
    pub fn substream_path(&self, path: &[u64]) -> RngStream {
        path.iter().fold(self.clone(), |s, &i| s.substream(i))
    }

    /// Draws a fresh key from this stream and returns a stream rooted at it.
    /// Repeated forks from the same stream yield distinct children.
    pub fn fork(&mut self) -> RngStream {
        let key = splitmix64(self.rng.next_u64());
        RngStream {
            key,
            rng: ChaCha8Rng::seed_from_u64(key),
        }
    }

    /// Uniform draw on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}
