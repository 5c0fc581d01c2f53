//! Deterministic seeded randomness.
//!
//! The generator is counter-based ChaCha8 keyed by a 64-bit seed expanded
//! through SplitMix64, with the 64-bit stream id selecting an independent
//! sequence. Identical `(seed, stream)` produce identical samples on every
//! platform. Normal variates use the Box-Muller transform (chosen once,
//! documented here) on 53-bit uniforms.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

/// Stream ids used by the training pipeline, kept in one place so every
/// consumer of randomness is reproducible and independent of the others.
pub mod streams {
    pub const WEIGHT_INIT: u64 = 1;
    pub const DATA_SELECT: u64 = 2;
    pub const EPOCH_ORDER: u64 = 3;
    pub const CROP: u64 = 4;
    pub const MASK: u64 = 5;
    pub const PROBE: u64 = 6;

    /// Pack a purpose tag with up to two loop counters into a stream id.
    pub fn derived(purpose: u64, a: u64, b: u64) -> u64 {
        (purpose << 48) ^ ((a & 0xff_ffff) << 24) ^ (b & 0xff_ffff)
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Serializable generator state for checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

/// Deterministic random source; see the module docs for the algorithm.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut s = seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
        }
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn restore(state: &RngState) -> Self {
        let mut rng = Self::new(state.seed, state.stream);
        rng.inner.set_word_pos(state.word_pos);
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_f64()
    }

    /// Unbiased uniform integer in `[0, n)` by rejection sampling.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller; pairs are cached so consecutive draws
    /// cost one transform per two samples.
    pub fn normal_f64(&mut self) -> f64 {
        if let Some(v) = self.spare_normal.take() {
            return v;
        }
        // u in (0, 1] so ln(u) is finite.
        let u = 1.0 - self.uniform_f64();
        let v = self.uniform_f64();
        let r = (-2.0 * u.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * v;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn sample_uniform<F: Scalar>(
        &mut self,
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
    ) -> Tensor<F> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::of_f64(self.uniform_range(lo, hi)))
            .collect();
        Tensor::new(shape, data).expect("shape/data constructed consistently")
    }

    pub fn sample_normal<F: Scalar>(
        &mut self,
        shape: impl Into<Vec<usize>>,
        mean: f64,
        std: f64,
    ) -> Tensor<F> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::of_f64(mean + std * self.normal_f64()))
            .collect();
        Tensor::new(shape, data).expect("shape/data constructed consistently")
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices drawn uniformly from `[0, n)`, returned sorted.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct values from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        // Partial Fisher-Yates: after i swaps the first i entries are the sample.
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        let mut out = pool[..k].to_vec();
        out.sort_unstable();
        out
    }
}
