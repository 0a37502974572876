//! Explicitly seeded counter-based random streams.
//!
//! There is no global RNG state anywhere in the crate: every consumer takes
//! a generator built here from an explicit seed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sub-stream `stream` of the generator seeded with `seed`.
pub fn stream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Combines two indices into one stream id.
pub fn stream_id(a: u64, b: u64) -> u64 {
    (a << 32) ^ (b & 0xffff_ffff)
}

/// Source of uniform draws in `[0, 1)` used for Bernoulli edge sampling.
pub trait UniformSource {
    fn next_uniform(&mut self) -> f64;
}

impl<R: RngCore> UniformSource for R {
    fn next_uniform(&mut self) -> f64 {
        self.random::<f64>()
    }
}

/// Replays a fixed list of draws, cycling when exhausted.
#[derive(Debug, Clone)]
pub struct ScriptedUniform {
    draws: Vec<f64>,
    pos: usize,
}

impl ScriptedUniform {
    pub fn new(draws: Vec<f64>) -> Self {
        assert!(!draws.is_empty(), "scripted stream needs at least one draw");
        Self { draws, pos: 0 }
    }

    pub fn constant(v: f64) -> Self {
        Self::new(vec![v])
    }
}

impl UniformSource for ScriptedUniform {
    fn next_uniform(&mut self) -> f64 {
        let v = self.draws[self.pos % self.draws.len()];
        self.pos += 1;
        v
    }
}
