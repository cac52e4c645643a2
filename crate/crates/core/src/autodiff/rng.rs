//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by `seed` with an independent
//! 64-bit stream id. The exact draw procedures are documented in
//! `docs/rng.md` so that other implementations can reproduce them.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::tensor::Tensor;

/// Stream id used for task data. It depends only on the seed so that all
/// conditions sharing a seed see the same batches.
pub const DATA_STREAM: u64 = 0;

/// FNV-1a hash of a label, used to derive stream ids from names.
pub fn stream_id(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // Keep clear of DATA_STREAM.
    h | 1
}

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, DATA_STREAM)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner, spare: None }
    }

    /// Parameter-initialization stream for one condition.
    pub fn for_init(seed: u64, condition: &str) -> Self {
        Self::with_stream(seed, stream_id(&format!("init:{condition}")))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by floor(u * n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    /// Standard normal via Box–Muller; the second value of each pair is cached.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.gaussian()
    }

    /// Inverse-CDF draw from unnormalized non-negative weights.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let total: f64 = probs.iter().sum();
        let u = self.uniform() * total;
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    /// Gaussian tensor with mean 0 and std `1/sqrt(fan_in)`.
    pub fn init_matrix(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let std = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.normal(0.0, std)).collect();
        Tensor::matrix(fan_in, fan_out, data).expect("init shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..1000 {
            assert_eq!(a.gaussian().to_bits(), b.gaussian().to_bits());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = Rng::with_stream(7, 0);
        let mut b = Rng::for_init(7, "baseline");
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = Rng::new(3);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
