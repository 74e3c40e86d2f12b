//! Reproducible per-trajectory noise.
//!
//! A `RandomStream` is a ChaCha8 keystream selected by `(base_seed,
//! trajectory_index)`. Every step consumes exactly two 64-bit words, so the
//! normal deviate for step `j` lives at a fixed keystream offset and can be
//! regenerated in any order.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Source of standard-normal deviates, one per simulation step.
pub trait NoiseSource {
    fn next_standard_normal(&mut self) -> f64;

    /// `(base_seed, trajectory_index)` recorded alongside generated outcomes.
    fn stream_key(&self) -> (u64, u64) {
        (0, 0)
    }
}

const WORDS_PER_STEP: u128 = 4;

#[derive(Clone, Debug)]
pub struct RandomStream {
    rng: ChaCha8Rng,
    base_seed: u64,
    trajectory_index: u64,
    step: u64,
}

impl RandomStream {
    pub fn new(base_seed: u64, trajectory_index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
        rng.set_stream(trajectory_index);
        Self {
            rng,
            base_seed,
            trajectory_index,
            step: 0,
        }
    }

    pub fn base_seed(&self) -> u64 {
        self.base_seed
    }

    pub fn trajectory_index(&self) -> u64 {
        self.trajectory_index
    }

    /// Index of the step the next draw belongs to.
    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn seek(&mut self, step: u64) {
        self.step = step;
    }

    /// The deviate keyed by `(base_seed, trajectory_index, step)`.
    pub fn standard_normal_at(&mut self, step: u64) -> f64 {
        let pos = step as u128 * WORDS_PER_STEP;
        if self.rng.get_word_pos() != pos {
            self.rng.set_word_pos(pos);
        }
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        box_muller(a, b)
    }
}

impl NoiseSource for RandomStream {
    fn next_standard_normal(&mut self) -> f64 {
        let z = self.standard_normal_at(self.step);
        self.step += 1;
        z
    }

    fn stream_key(&self) -> (u64, u64) {
        (self.base_seed, self.trajectory_index)
    }
}

#[inline]
fn box_muller(a: u64, b: u64) -> f64 {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    // u1 in (0, 1] keeps the logarithm finite
    let u1 = ((a >> 11) + 1) as f64 * SCALE;
    let u2 = (b >> 11) as f64 * SCALE;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Replays a fixed list of deviates; used to inject noise in tests.
#[derive(Clone, Debug)]
pub struct ScriptedNoise {
    values: Vec<f64>,
    pos: usize,
}

impl ScriptedNoise {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values, pos: 0 }
    }

    pub fn constant(value: f64, len: usize) -> Self {
        Self::new(vec![value; len])
    }
}

impl NoiseSource for ScriptedNoise {
    fn next_standard_normal(&mut self) -> f64 {
        let z = self
            .values
            .get(self.pos)
            .copied()
            .expect("scripted noise exhausted");
        self.pos += 1;
        z
    }
}
