//! SplitMix64 generator with Box–Muller Gaussians.
//!
//! Draw order is part of the reproducibility contract: every uniform draw
//! consumes exactly one `next_u64`, and Gaussians are produced in pairs from
//! two consecutive uniforms, the second value of a pair being cached for the
//! next call. Reseeding discards the cached value.

use super::{Scalar, Tensor};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
    cached: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: seed,
            cached: None,
        }
    }

    /// Independent stream for `(seed, stream)`, e.g. one per corpus item.
    pub fn derive(seed: u64, stream: u64) -> Self {
        Self::new(mix(seed ^ mix(stream.wrapping_add(GOLDEN))))
    }

    pub fn reseed(&mut self, seed: u64) {
        self.state = seed;
        self.cached = None;
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (`n > 0`).
    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn gaussian(&mut self) -> f64 {
        if let Some(v) = self.cached.take() {
            return v;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.cached = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Tensor of i.i.d. standard normals filled in row-major order.
    pub fn gaussian_tensor<F: Scalar>(&mut self, shape: &[usize]) -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::c(self.gaussian())).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }
}

/// Standard-normal tensor drawn from `rng`.
pub fn gaussian<F: Scalar>(rng: &mut Rng, shape: &[usize]) -> Tensor<F> {
    rng.gaussian_tensor(shape)
}
