//! Counter-based Gaussian streams.
//!
//! Every stream is a ChaCha20 keystream. The 256-bit key is `seed (u64 LE) ‖ purpose (u64 LE) ‖
//! 16 zero bytes`, the 64-bit stream id is the trajectory index, and step `j` of a stream with
//! noise dimension `d` starts at 32-bit word `j · 4 · ceil(d/2)`. Each pair of normals uses two
//! consecutive `u64` draws `x, y` (little-endian word pairs) and Box–Muller:
//! `u1 = ((x >> 11) + 1) · 2^-53`, `u2 = (y >> 11) · 2^-53`,
//! `(√(−2 ln u1) cos 2πu2, √(−2 ln u1) sin 2πu2)`. An odd `d` discards the sine of the last pair.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Increments = 0,
    InitialStates = 1,
    Auxiliary = 2,
}

pub fn stream(seed: u64, purpose: Purpose, id: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    let mut rng = ChaCha20Rng::from_seed(key);
    rng.set_stream(id);
    rng
}

fn words_per_draw(d: usize) -> u128 {
    4 * d.div_ceil(2) as u128
}

/// Fill `out` with standard normals from the next `4·ceil(len/2)` words.
pub fn fill_normals(rng: &mut ChaCha20Rng, out: &mut [f64]) {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    for pair in out.chunks_mut(2) {
        let x = rng.next_u64();
        let y = rng.next_u64();
        let u1 = ((x >> 11) + 1) as f64 * SCALE;
        let u2 = (y >> 11) as f64 * SCALE;
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        pair[0] = r * c;
        if pair.len() > 1 {
            pair[1] = r * s;
        }
    }
}

/// Brownian increments `ΔW ~ N(0, h I_d)` for a fixed seed, step and noise dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisePlan {
    pub seed: u64,
    pub h: f64,
    pub horizon: f64,
    pub d: usize,
}

impl NoisePlan {
    pub fn new(seed: u64, h: f64, horizon: f64, d: usize) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::invalid("dynamics", "scheme.h", format!("step must be positive, got {h}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::invalid("dynamics", "scheme.T", format!("horizon must be positive, got {horizon}")));
        }
        if d == 0 {
            return Err(Error::invalid("dynamics", "d", "noise dimension must be positive"));
        }
        Ok(NoisePlan { seed, h, horizon, d })
    }

    /// Number of steps, `round(T/h)` and at least one.
    pub fn steps(&self) -> usize {
        ((self.horizon / self.h).round() as usize).max(1)
    }

    pub fn with_h(&self, h: f64) -> Result<Self> {
        NoisePlan::new(self.seed, h, self.horizon, self.d)
    }

    pub fn increments(&self, trajectory: u64) -> Increments {
        Increments {
            rng: stream(self.seed, Purpose::Increments, trajectory),
            sqrt_h: self.h.sqrt(),
            d: self.d,
        }
    }

    /// Random access to the increment of one step; equals the sequential draw.
    pub fn increment_at(&self, trajectory: u64, step: usize, out: &mut [f64]) {
        let mut inc = self.increments(trajectory);
        inc.rng.set_word_pos(step as u128 * words_per_draw(self.d));
        inc.next_into(out);
    }
}

pub struct Increments {
    rng: ChaCha20Rng,
    sqrt_h: f64,
    d: usize,
}

impl Increments {
    pub fn next_into(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.d);
        fill_normals(&mut self.rng, out);
        out.iter_mut().for_each(|v| *v *= self.sqrt_h);
    }
}
