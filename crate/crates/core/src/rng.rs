//! Deterministic random streams.
//!
//! Every consumer derives its own ChaCha stream from (seed, purpose id,
//! index), so resuming training at iteration k reproduces exactly the draws
//! an unbroken run would have made at k.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stream purposes; the discriminant is mixed into the derived seed.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    WeightInit = 1,
    Batch = 2,
    Latent = 3,
    RollAugment = 4,
    DataPrep = 5,
}

pub fn derive_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    // splitmix-style mixing of (seed, stream, index) into one 64-bit seed
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((stream as u64) << 32)
        .wrapping_add(index);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Standard normal via Box-Muller (two uniforms per pair of outputs).
pub fn normal_vec<T: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(T::from_f64(r * theta.cos()));
        if out.len() < n {
            out.push(T::from_f64(r * theta.sin()));
        }
    }
    out
}

pub fn uniform_vec<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<T> {
    (0..n).map(|_| T::from_f64(rng.gen_range(lo..hi))).collect()
}

pub fn randn<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::from_vec(normal_vec(rng, n), shape).expect("shape/len agree")
}

/// He-style uniform initialization scaled by fan-in.
pub fn he_uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let lim = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(uniform_vec(rng, n, -lim, lim), shape).expect("shape/len agree")
}
