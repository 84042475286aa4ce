//! Seeded randomness. Every stochastic routine in the crate draws from a
//! [`ChaCha8Rng`] derived from an explicit seed so runs replay bit-exactly.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::Result;

/// Mixes a base seed with a list of tags (splitmix64 finalizer per word).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut h = base ^ 0x9E37_79B9_7F4A_7C15;
    for &t in tags {
        h = splitmix(h ^ splitmix(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Standard normal tensor of the given shape. Values are drawn in f64 and
/// cast, so the f32 and f64 variants of a draw agree up to rounding.
pub fn randn<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n = shape.iter().product();
    let v = normal_vec(rng, n);
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

pub fn uniform_tensor<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    low: f64,
    high: f64,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(low..high)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}
