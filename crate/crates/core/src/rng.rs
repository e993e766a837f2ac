//! Deterministic random streams.
//!
//! Every random draw in the crate comes from ChaCha8, a counter-based
//! generator: a `(seed, stream)` pair names an independent 2^64-block
//! stream, so splitting work into blocks or channels never shifts another
//! consumer's numbers. Gaussian samples use the Box-Muller transform on two
//! 53-bit uniforms, consuming both outputs of each pair. Streams are
//! reproducible within this implementation; no cross-language bit identity
//! is promised.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Stream ids used by the crate. Keeping them in one place prevents two
/// consumers from silently sharing a stream.
pub mod streams {
    /// Gaussian entries of synthetic tensors.
    pub const SYNTH_VALUES: u64 = 0;
    /// Outlier channel selection for synthetic tensors.
    pub const SYNTH_CHANNELS: u64 = 1;
    /// Random sign diagonals; block `i` of a rotation uses `ROTATION_SIGNS + i`.
    pub const ROTATION_SIGNS: u64 = 1 << 32;
}

pub struct Stream {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` by rejection (no modulo bias).
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    pub fn sign(&mut self) -> f32 {
        if self.next_u64() >> 63 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// Standard normal via Box-Muller.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.spare = Some(radius * libm::sin(theta));
        radius * libm::cos(theta)
    }
}
