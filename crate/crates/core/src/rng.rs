//! Keyed, counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 keystream whose 256-bit key
//! is the little-endian concatenation of four `u64` words:
//!
//! ```text
//! key = seed || stream tag || word0 || word1
//! ```
//!
//! `word0`/`word1` carry the coordinates of the consumer (training step, molecule id,
//! batch slot, ...). Because the key is a pure function of those coordinates, any draw
//! can be reproduced in isolation, on any platform and with any number of worker threads.
//!
//! Derived values:
//! * `uniform()` = `(next_u64 >> 11) * 2^-53`, in `[0, 1)`.
//! * `normal()` = Box–Muller on two uniforms `u1, u2`:
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`; the sine branch is discarded.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream tags. Values are part of the on-disk reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Blend = 2,
    Noise = 3,
    Fixture = 4,
    InfoTrials = 5,
    Shuffle = 6,
}

pub struct KeyedRng {
    inner: ChaCha8Rng,
}

impl KeyedRng {
    pub fn new(seed: u64, stream: Stream, word0: u64, word1: u64) -> Self {
        let mut key = [0u8; 32];
        for (chunk, word) in key
            .chunks_exact_mut(8)
            .zip([seed, stream as u64, word0, word1])
        {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        Self {
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        let span = (hi - lo + 1) as f64;
        lo + ((self.uniform() * span) as usize).min(hi - lo)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Frozen outputs, cross-checked against a from-scratch ChaCha8 block function
    // (8 rounds, zero nonce, block counter 0). A change here breaks reproducibility of
    // every checkpoint and mask produced by earlier builds.
    #[test]
    fn test_vectors() {
        let mut rng = KeyedRng::new(0, Stream::Init, 0, 0);
        let got: Vec<u64> = (0..3).map(|_| rng.next_u64()).collect();
        assert_eq!(got, TEST_VECTOR_SEED0_INIT);

        let mut rng = KeyedRng::new(42, Stream::Blend, 7, 3);
        let got: Vec<u64> = (0..3).map(|_| rng.next_u64()).collect();
        assert_eq!(got, TEST_VECTOR_SEED42_BLEND);
    }

    const TEST_VECTOR_SEED0_INIT: [u64; 3] = [
        4606029925845525861,
        5881008411243030533,
        6840029072272234182,
    ];
    const TEST_VECTOR_SEED42_BLEND: [u64; 3] = [
        15202020301500546468,
        1972140563697774174,
        3869140729979593954,
    ];

    #[test]
    fn streams_are_distinct() {
        let a = KeyedRng::new(1, Stream::Blend, 0, 0).next_u64();
        let b = KeyedRng::new(1, Stream::Noise, 0, 0).next_u64();
        let c = KeyedRng::new(1, Stream::Blend, 0, 1).next_u64();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_in_unit_interval_and_normal_moments() {
        let mut rng = KeyedRng::new(9, Stream::Fixture, 0, 0);
        let n = 200_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
            let z = rng.normal();
            sum += z;
            sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }
}
