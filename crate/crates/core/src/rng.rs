//! Deterministic random number streams for reproducible experiments.
//!
//! Every stochastic component draws from a [`Stream`], a counter-based wrapper
//! around ChaCha12 keyed by a single `u64`. Streams can be split into
//! statistically independent child streams by index, so a master seed plus a
//! fixed spawning discipline pins down every draw in a run regardless of
//! thread scheduling.

use nalgebra::DVector;
use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

/// SplitMix64 finalizer; bijective on `u64` with good avalanche behavior.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the key of child stream `index` from a parent key.
///
/// The derivation depends only on `(key, index)`, never on how many draws the
/// parent has made, so callers may spawn children before or after using the
/// parent without perturbing either sequence.
pub fn child_key(key: u64, index: u64) -> u64 {
    splitmix64(key ^ splitmix64(index.wrapping_add(1)))
}

/// A seeded random stream with deterministic child-spawning.
#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha12Rng,
    key: u64,
}

impl Stream {
    /// Creates a stream from a 64-bit key.
    pub fn new(key: u64) -> Self {
        Stream {
            rng: ChaCha12Rng::seed_from_u64(key),
            key,
        }
    }

    /// The key this stream was created with.
    pub fn key(&self) -> u64 {
        self.key
    }

    /// Spawns the child stream at `index`; independent of draw position.
    pub fn child(&self, index: u64) -> Stream {
        Stream::new(child_key(self.key, index))
    }

    /// Next raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw on `[0, 1)` with 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw on `(0, 1]`; safe as a logarithm argument.
    fn uniform_open_zero(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// One pair of independent standard normal draws (Box-Muller).
    pub fn standard_normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform_open_zero();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let (sin, cos) = (std::f64::consts::TAU * u2).sin_cos();
        (radius * cos, radius * sin)
    }

    /// One standard normal draw. Consumes a full pair to keep the stream
    /// position a function of the number of calls alone.
    pub fn standard_normal(&mut self) -> f64 {
        self.standard_normal_pair().0
    }

    /// Fills `out` with independent standard normal draws.
    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.standard_normal_pair();
            pair[0] = a;
            pair[1] = b;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.standard_normal_pair().0;
        }
    }

    /// A vector of `dim` independent standard normal draws.
    pub fn standard_normal_vec(&mut self, dim: usize) -> DVector<f64> {
        let mut v = DVector::zeros(dim);
        self.fill_standard_normal(v.as_mut_slice());
        v
    }

    /// Uniform draw on the unit sphere in `dim` dimensions.
    pub fn unit_sphere(&mut self, dim: usize) -> DVector<f64> {
        let mut v = self.standard_normal_vec(dim);
        let norm = v.norm();
        if norm < 1e-300 {
            // Astronomically unlikely; fall back to a fixed direction rather
            // than divide by zero.
            v.fill(0.0);
            v[0] = 1.0;
            return v;
        }
        v / norm
    }

    /// Uniform draw from the closed ball of the given radius.
    pub fn in_ball(&mut self, dim: usize, radius: f64) -> DVector<f64> {
        let direction = self.unit_sphere(dim);
        let scale = radius * self.uniform().powf(1.0 / dim as f64);
        direction * scale
    }
}
