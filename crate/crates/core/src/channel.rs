//! Complex AWGN channel with average power normalization.
//!
//! Encoders emit real vectors of length `2k`; these are packed as `k`
//! complex symbols with the first half holding real parts and the second
//! half imaginary parts.

use candle_core::{Tensor, D};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{randn, rng_from_seed};
use crate::{Error, Result};

pub const DEFAULT_AVG_POWER: f64 = 1.0;

/// Complex channel symbols `z ∈ C^k`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelVector {
    symbols: Vec<Complex64>,
}

impl ChannelVector {
    pub fn new(symbols: Vec<Complex64>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::Config("channel vector needs at least one symbol".into()));
        }
        Ok(Self { symbols })
    }

    /// Unpacks `[re_0..re_{k-1}, im_0..im_{k-1}]`.
    pub fn from_packed(real: &[f64]) -> Result<Self> {
        if real.is_empty() || !real.len().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "packed channel vector must have even, nonzero length; got {}",
                real.len()
            )));
        }
        let k = real.len() / 2;
        Self::new(
            (0..k)
                .map(|i| Complex64::new(real[i], real[k + i]))
                .collect(),
        )
    }

    pub fn to_packed(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.symbols.iter().map(|c| c.re).collect();
        out.extend(self.symbols.iter().map(|c| c.im));
        out
    }

    pub fn symbols(&self) -> &[Complex64] {
        &self.symbols
    }

    /// Number of channel uses `k`.
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// `(1/k)‖z‖²`.
    pub fn mean_power(&self) -> f64 {
        mean_power(&self.symbols)
    }
}

fn mean_power(z: &[Complex64]) -> f64 {
    z.iter().map(|c| c.norm_sqr()).sum::<f64>() / z.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub avg_power: f64,
    pub snr_db: f64,
}

impl ChannelParams {
    pub fn new(avg_power: f64, snr_db: f64) -> Result<Self> {
        if !(avg_power > 0.0) {
            return Err(Error::Config(format!("average power must be > 0, got {avg_power}")));
        }
        Ok(Self { avg_power, snr_db })
    }

    pub fn sigma_sq(&self) -> f64 {
        snr_to_sigma_sq(self.snr_db, self.avg_power)
    }
}

/// `z = sqrt(k·P̄) · z̃ / ‖z̃‖`, so that `(1/k)‖z‖² = P̄`.
pub fn normalize_power(z_tilde: &[Complex64], avg_power: f64) -> Result<ChannelVector> {
    if z_tilde.is_empty() {
        return Err(Error::Config("empty channel input".into()));
    }
    if !(avg_power > 0.0) {
        return Err(Error::Config(format!("average power must be > 0, got {avg_power}")));
    }
    let norm_sq: f64 = z_tilde.iter().map(|c| c.norm_sqr()).sum();
    if !(norm_sq > 0.0) || !norm_sq.is_finite() {
        return Err(Error::Degenerate(
            "cannot normalize a zero-norm channel input".into(),
        ));
    }
    let k = z_tilde.len() as f64;
    let scale = (k * avg_power).sqrt() / norm_sq.sqrt();
    ChannelVector::new(z_tilde.iter().map(|c| c * scale).collect())
}

/// Noise variance for a given SNR: `σ² = P̄ · 10^(−snr/10)`. `+∞` dB maps to 0.
pub fn snr_to_sigma_sq(snr_db: f64, avg_power: f64) -> f64 {
    if snr_db == f64::INFINITY {
        return 0.0;
    }
    avg_power * 10f64.powf(-snr_db / 10.0)
}

pub fn sigma_sq_to_snr_db(sigma_sq: f64, avg_power: f64) -> f64 {
    10.0 * (avg_power / sigma_sq).log10()
}

/// `ẑ = z + n`, `n ~ CN(0, σ²I)`: each real and imaginary part gets variance σ²/2.
pub fn awgn(z: &ChannelVector, sigma_sq: f64, seed: u64) -> Result<ChannelVector> {
    if !(sigma_sq >= 0.0) {
        return Err(Error::Config(format!("noise variance must be >= 0, got {sigma_sq}")));
    }
    if sigma_sq == 0.0 {
        return Ok(z.clone());
    }
    let mut rng = rng_from_seed(seed);
    let std = (sigma_sq / 2.0).sqrt();
    let symbols = z
        .symbols
        .iter()
        .map(|c| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            c + Complex64::new(re * std, im * std)
        })
        .collect();
    ChannelVector::new(symbols)
}

/// SNR measured from a transmitted vector and its received version.
pub fn empirical_snr_db(z: &ChannelVector, z_hat: &ChannelVector) -> f64 {
    let noise: Vec<Complex64> = z_hat
        .symbols
        .iter()
        .zip(&z.symbols)
        .map(|(a, b)| a - b)
        .collect();
    10.0 * (z.mean_power() / mean_power(&noise)).log10()
}

/// Batched, differentiable power normalization over packed real tensors
/// of shape `(B, 2k)`.
pub fn normalize_power_packed(z_tilde: &Tensor, avg_power: f64) -> Result<Tensor> {
    let (_, n) = z_tilde.dims2()?;
    if n == 0 || n % 2 != 0 {
        return Err(Error::Config(format!("packed length must be even and nonzero, got {n}")));
    }
    let k = (n / 2) as f64;
    let norm_sq = z_tilde.sqr()?.sum_keepdim(D::Minus1)?;
    let min = crate::nn::to_f64_vec(&norm_sq)?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(Error::Degenerate(
            "cannot normalize a zero-norm channel input".into(),
        ));
    }
    let scale = norm_sq.sqrt()?.recip()?.affine((k * avg_power).sqrt(), 0.0)?;
    Ok(z_tilde.broadcast_mul(&scale)?)
}

/// Batched AWGN on packed real tensors; per-component variance σ²/2.
pub fn awgn_packed<R: Rng + ?Sized>(z: &Tensor, sigma_sq: f64, rng: &mut R) -> Result<Tensor> {
    if !(sigma_sq >= 0.0) {
        return Err(Error::Config(format!("noise variance must be >= 0, got {sigma_sq}")));
    }
    if sigma_sq == 0.0 {
        return Ok(z.clone());
    }
    let noise = randn(rng, z.dims(), z.dtype(), z.device())?;
    Ok((z + noise.affine((sigma_sq / 2.0).sqrt(), 0.0)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn all_ones_already_normalized() {
        let z = normalize_power(&[c(1.0, 0.0); 4], 1.0).unwrap();
        for s in z.symbols() {
            assert!((s - c(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn single_spike_keeps_shape() {
        let z = normalize_power(&[c(2.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)], 1.0).unwrap();
        let expect = [c(2.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)];
        for (a, b) in z.symbols().iter().zip(expect) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_norm_is_degenerate() {
        let err = normalize_power(&[c(0.0, 0.0); 3], 1.0).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn snr_conversions() {
        assert_eq!(snr_to_sigma_sq(0.0, 1.0), 1.0);
        assert!((snr_to_sigma_sq(10.0, 1.0) - 0.1).abs() < 1e-15);
        // 10^(5/10) evaluated independently
        let oracle = 10f64.powf(0.5);
        assert!((snr_to_sigma_sq(-5.0, 1.0) - oracle).abs() < 1e-12);
        assert!((snr_to_sigma_sq(-5.0, 1.0) - 3.16228).abs() < 1e-5);
        assert_eq!(snr_to_sigma_sq(f64::INFINITY, 1.0), 0.0);
        assert!((sigma_sq_to_snr_db(snr_to_sigma_sq(3.0, 2.0), 2.0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_is_identity() {
        let z = ChannelVector::new(vec![c(0.3, -1.0), c(2.0, 0.5)]).unwrap();
        assert_eq!(awgn(&z, 0.0, 9).unwrap(), z);
    }

    #[test]
    fn awgn_is_deterministic_per_seed() {
        let z = ChannelVector::new(vec![c(1.0, 0.0); 16]).unwrap();
        assert_eq!(awgn(&z, 0.5, 3).unwrap(), awgn(&z, 0.5, 3).unwrap());
        assert_ne!(awgn(&z, 0.5, 3).unwrap(), awgn(&z, 0.5, 4).unwrap());
    }

    #[test]
    fn noise_power_monte_carlo() {
        let z = ChannelVector::new(vec![c(0.0, 0.0); 100_000]).unwrap();
        let p = awgn(&z, 1.0, 42).unwrap().mean_power();
        assert!((0.99..=1.01).contains(&p), "empirical power {p}");
    }

    #[test]
    fn packing_layout() {
        let v = ChannelVector::from_packed(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(v.symbols(), &[c(1.0, 3.0), c(2.0, 4.0)]);
        assert_eq!(v.to_packed(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(ChannelVector::from_packed(&[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn packed_tensor_normalization_matches_complex_route() {
        let d = Device::Cpu;
        let raw = vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.5];
        let t = Tensor::from_vec(raw.clone(), (1, 6), &d).unwrap();
        let packed = crate::nn::to_f64_vec(&normalize_power_packed(&t, 1.0).unwrap()).unwrap();
        let direct = normalize_power(ChannelVector::from_packed(&raw).unwrap().symbols(), 1.0)
            .unwrap()
            .to_packed();
        for (a, b) in packed.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        let zero = Tensor::zeros((2, 4), DType::F64, &d).unwrap();
        assert!(matches!(
            normalize_power_packed(&zero, 1.0),
            Err(Error::Degenerate(_))
        ));
    }

    proptest! {
        #[test]
        fn power_constraint_holds(values in proptest::collection::vec(-10.0f64..10.0, 2..64), p in 0.1f64..4.0) {
            let mut values = values;
            if values.len() % 2 == 1 { values.pop(); }
            prop_assume!(values.iter().any(|v| v.abs() > 1e-6));
            let zt = ChannelVector::from_packed(&values).unwrap();
            let z = normalize_power(zt.symbols(), p).unwrap();
            prop_assert!((z.mean_power() - p).abs() < 1e-9 * p.max(1.0));
        }
    }
}
