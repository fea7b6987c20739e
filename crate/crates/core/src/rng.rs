//! Seeded, seekable random streams.
//!
//! Every logical draw consumes exactly two 64-bit words of a ChaCha8 keystream
//! keyed by the 64-bit seed, so the `n`-th draw of a stream is a pure function
//! of `(seed, n)`. Normals use the cosine branch of the Box-Muller transform.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identifier recorded in reports so runs can be replayed.
pub const GENERATOR: &str = "chacha8-seed_from_u64/box-muller-cos/2x64-per-draw";

const WORDS_PER_DRAW: u128 = 4;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    position: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            position: 0,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of logical draws taken so far.
    pub fn position(&self) -> u64 {
        self.position
    }

    pub fn seek(&mut self, position: u64) {
        self.position = position;
        self.inner
            .set_word_pos(u128::from(position) * WORDS_PER_DRAW);
    }

    /// Independent stream for a sub-task, derived from this stream's seed and `tags`.
    pub fn child(&self, tags: &[u64]) -> RngStream {
        RngStream::new(derive_seed(self.seed, tags))
    }

    fn pair(&mut self) -> (u64, u64) {
        self.position += 1;
        (self.inner.next_u64(), self.inner.next_u64())
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        let (a, _) = self.pair();
        unit_closed_open(a)
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        let (a, _) = self.pair();
        ((u128::from(a) * u128::from(n)) >> 64) as u64
    }

    pub fn standard_normal(&mut self) -> f64 {
        let (a, b) = self.pair();
        // (0, 1] keeps the logarithm finite
        let u1 = 1.0 - unit_closed_open(a);
        let u2 = unit_closed_open(b);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal(&mut self, sigma: f64) -> f64 {
        sigma * self.standard_normal()
    }
}

fn unit_closed_open(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed splitting: hashes `seed` together with an ordered tag list.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)))
}

/// `n` independent draws from `N(0, sigma²)`, advancing `rng` by exactly `n` draws.
pub fn sample_normal(rng: &mut RngStream, sigma: f64, n: usize) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!(
            "standard deviation must be finite and >= 0, got {sigma}"
        )));
    }
    let data: Vec<f64> = (0..n).map(|_| rng.normal(sigma)).collect();
    if n == 0 {
        return Ok(Tensor::vector(data));
    }
    Tensor::new(vec![n], data)
}
