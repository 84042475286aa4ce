use std::cell::Cell;

use candle_core::{DType, Device, Result, Tensor};
use sing_core::degradation::LinearDegradation;
use sing_core::diffusion::{to_model_domain, DenoiserConfig, DenoiserModel, NoisePredictor, NoiseSchedule};
use sing_core::nn::max_abs_diff;
use sing_core::rng::{rng_from_seed, uniform_tensor};
use sing_core::sing_zero::{restore, SingZeroConfig};

/// Always "knows" the clean image: returns the noise that makes `x̂₀ = x_gt`.
struct Oracle {
    x_gt: Tensor,
    schedule: NoiseSchedule,
}

impl NoisePredictor for Oracle {
    fn predict_noise(&self, x_t: &Tensor, ts: &[usize]) -> sing_core::Result<Tensor> {
        let ab = self.schedule.alpha_bar(ts[0]);
        let gt = to_model_domain(&self.x_gt.to_dtype(x_t.dtype())?)?;
        Ok((x_t - gt.affine(ab.sqrt(), 0.0)?)?.affine(1.0 / (1.0 - ab).sqrt(), 0.0)?)
    }
}

struct Counting<M> {
    inner: M,
    calls: Cell<usize>,
}

impl<M: NoisePredictor> NoisePredictor for Counting<M> {
    fn predict_noise(&self, x_t: &Tensor, ts: &[usize]) -> sing_core::Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict_noise(x_t, ts)
    }
}

fn image(seed: u64, hw: usize) -> Tensor {
    uniform_tensor(&mut rng_from_seed(seed), &[1, 3, hw, hw], 0.0, 1.0, DType::F64, &Device::Cpu).unwrap()
}

fn random_denoiser(seed: u64) -> DenoiserModel {
    let cfg = DenoiserConfig {
        channels: 3,
        width: 8,
        time_dim: 8,
        timesteps: 200,
        ..Default::default()
    };
    DenoiserModel::new(cfg, DType::F32, seed).unwrap()
}

fn f64_of(t: &Tensor) -> Result<Tensor> {
    t.to_dtype(DType::F64)
}

#[test]
fn oracle_denoiser_recovers_ground_truth() {
    let op = LinearDegradation::MeanPool { scale: 2 };
    let x_gt = image(1, 16);
    let y = op.apply(&x_gt).unwrap();
    let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    for t_eff in [100, 7] {
        let oracle = Oracle {
            x_gt: x_gt.clone(),
            schedule: schedule.clone(),
        };
        let cfg = SingZeroConfig {
            operator: op,
            t_effective: t_eff,
            seed: 5,
            ..Default::default()
        };
        let out = restore(&y, &oracle, &schedule, &cfg).unwrap();
        let err = max_abs_diff(&f64_of(&out.image).unwrap(), &x_gt).unwrap();
        assert!(err < 1e-4, "t_eff {t_eff}: {err:e}");
    }
}

#[test]
fn random_denoiser_output_is_consistent_at_64() {
    let op = LinearDegradation::MeanPool { scale: 2 };
    let model = random_denoiser(2);
    let y = op.apply(&image(3, 64)).unwrap();
    let cfg = SingZeroConfig {
        operator: op,
        t_effective: 20,
        seed: 9,
        ..Default::default()
    };
    let out = restore(&y, &model, model.schedule(), &cfg).unwrap();
    assert_eq!(out.image.dims(), &[1, 3, 64, 64]);
    let residual = max_abs_diff(&op.apply(&out.image).unwrap(), &f64_of(&y).unwrap()).unwrap();
    assert!(residual < 1e-4, "{residual:e}");
}

#[test]
fn identity_operator_returns_measurement() {
    let model = random_denoiser(4);
    let y = image(5, 8);
    let cfg = SingZeroConfig {
        operator: LinearDegradation::Identity,
        t_effective: 6,
        ..Default::default()
    };
    let out = restore(&y, &model, model.schedule(), &cfg).unwrap();
    assert!(max_abs_diff(&out.image, &y).unwrap() < 1e-12);
}

#[test]
fn exactly_t_effective_denoiser_calls() {
    let model = random_denoiser(6);
    let y = LinearDegradation::MeanPool { scale: 2 }.apply(&image(7, 8)).unwrap();
    for t_eff in [1, 13, 200] {
        let counting = Counting {
            inner: &model,
            calls: Cell::new(0),
        };
        let cfg = SingZeroConfig {
            t_effective: t_eff,
            operator: LinearDegradation::MeanPool { scale: 2 },
            ..Default::default()
        };
        let out = restore(&y, &counting, model.schedule(), &cfg).unwrap();
        assert_eq!(counting.calls.get(), t_eff);
        assert_eq!(out.denoiser_evals, t_eff);
    }
}

#[test]
fn same_seed_same_bits_other_seed_differs() {
    let model = random_denoiser(8);
    let op = LinearDegradation::MeanPool { scale: 2 };
    let y = op.apply(&image(9, 8)).unwrap();
    let run = |seed| {
        let cfg = SingZeroConfig {
            operator: op,
            t_effective: 10,
            seed,
            ..Default::default()
        };
        restore(&y, &model, model.schedule(), &cfg).unwrap().image
    };
    assert_eq!(max_abs_diff(&run(1), &run(1)).unwrap(), 0.0);
    assert!(max_abs_diff(&run(1), &run(2)).unwrap() > 0.0);
}

#[test]
fn zero_t_effective_is_rejected() {
    let model = random_denoiser(10);
    let cfg = SingZeroConfig {
        t_effective: 0,
        ..Default::default()
    };
    let y = LinearDegradation::MeanPool { scale: 2 }.apply(&image(11, 8)).unwrap();
    assert!(restore(&y, &model, model.schedule(), &cfg).is_err());
}
