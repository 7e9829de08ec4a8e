//! Seeded randomness.
//!
//! All stochastic choices in the pipeline (noise draws, timestep sampling,
//! reference selection, initialization) flow through [`Prng`] so a run is a
//! deterministic function of its root seed. Gaussian draws are generated in
//! `f64` and cast, so the stream is identical for `f32` and `f64` models.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Prng {
    inner: ChaCha20Rng,
    spare_normal: Option<f64>,
}

impl Prng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Prng {
            inner: ChaCha20Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Derive an independent child generator; `tag` separates streams that
    /// share a root seed.
    pub fn derive(&self, tag: &str) -> Prng {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in tag.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let mut base = self.inner.clone();
        let mix: u64 = base.random();
        Prng::seed_from_u64(h ^ mix)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    /// Standard normal draw (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] to keep the log finite.
        let u1 = 1.0 - self.inner.random::<f64>();
        let u2 = self.inner.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal_scaled<T: Scalar>(&mut self, std: f64) -> T {
        T::from_f64c(self.normal() * std)
    }

    /// Tensor of unit-Gaussian draws.
    pub fn normal_tensor<T: Scalar>(&mut self, shape: &[usize]) -> ArrayD<T> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::from_f64c(self.normal())).collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product mismatch")
    }

    /// Fisher-Yates shuffle of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}
