use std::cell::Cell;

use candle_core::{DType, Device, Tensor};
use sing_core::cond_inn::{CondInn, CondInnConfig, InvertibleSplit};
use sing_core::degradation::LinearDegradation;
use sing_core::diffusion::{DenoiserConfig, DenoiserModel, NoisePredictor};
use sing_core::nn::{max_abs_diff, to_f64_vec};
use sing_core::rng::{randn, rng_from_seed, uniform_tensor};
use sing_core::sing_inn::{guidance_gradient, guided_step, restore_inn, zeta_schedule, GuidanceMode, SingInnConfig};
use sing_core::sing_zero::{restore, SingZeroConfig};
use sing_core::Result;

const OP: LinearDegradation = LinearDegradation::MeanPool { scale: 2 };

/// Linear lifting `x ↦ (Ax, x − A†Ax)`: the inverse with `c = y` is exactly
/// the range/null recomposition.
struct RangeNull;

impl InvertibleSplit for RangeNull {
    fn forward(&self, x: &Tensor, _: &[f64]) -> Result<(Tensor, Tensor)> {
        Ok((OP.apply(x)?, (x - OP.project_range(x)?)?))
    }
    fn inverse(&self, c: &Tensor, d: &Tensor, _: &[f64]) -> Result<Tensor> {
        Ok((OP.pinv_apply(&c.to_dtype(d.dtype())?, d.dim(1)?)? + d)?)
    }
    fn snr_range(&self) -> (f64, f64) {
        (-5.0, 5.0)
    }
}

struct CountingInn<I> {
    inner: I,
    forward: Cell<usize>,
    inverse: Cell<usize>,
}

impl<I: InvertibleSplit> InvertibleSplit for CountingInn<I> {
    fn forward(&self, x: &Tensor, snr: &[f64]) -> Result<(Tensor, Tensor)> {
        self.forward.set(self.forward.get() + 1);
        self.inner.forward(x, snr)
    }
    fn inverse(&self, c: &Tensor, d: &Tensor, snr: &[f64]) -> Result<Tensor> {
        self.inverse.set(self.inverse.get() + 1);
        self.inner.inverse(c, d, snr)
    }
    fn snr_range(&self) -> (f64, f64) {
        self.inner.snr_range()
    }
}

struct CountingModel<'a> {
    inner: &'a DenoiserModel,
    calls: Cell<usize>,
}

impl NoisePredictor for CountingModel<'_> {
    fn predict_noise(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict_noise(x_t, ts)
    }
}

fn denoiser(dtype: DType) -> DenoiserModel {
    let cfg = DenoiserConfig {
        channels: 3,
        width: 8,
        time_dim: 8,
        timesteps: 100,
        ..Default::default()
    };
    DenoiserModel::new(cfg, dtype, 21).unwrap()
}

fn inn(dtype: DType) -> CondInn {
    let cfg = CondInnConfig {
        hidden: 8,
        pairs: 2,
        blocks_per_net: 1,
        ..CondInnConfig::for_operator(&OP, 3).unwrap()
    };
    let inn = CondInn::new(cfg, dtype, 22).unwrap();
    inn.set_gates(0.5, 1.0).unwrap();
    inn
}

fn measurement(seed: u64, hw: usize) -> Tensor {
    let x = uniform_tensor(&mut rng_from_seed(seed), &[1, 3, hw, hw], 0.0, 1.0, DType::F64, &Device::Cpu).unwrap();
    OP.apply(&x).unwrap()
}

#[test]
fn exact_lifting_gives_zero_guidance() {
    let model = denoiser(DType::F64);
    let plan = model.schedule().respace(4).unwrap();
    let y = measurement(1, 8);
    let x_t = randn(&mut rng_from_seed(2), &[1, 3, 8, 8], DType::F64, &Device::Cpu).unwrap();
    for i in 1..=4 {
        for mode in [GuidanceMode::Full, GuidanceMode::StopDenoiser] {
            let step = guided_step(&x_t, &y, i, &plan, &model, &RangeNull, &OP, 0.0, mode).unwrap();
            assert!(max_abs_diff(&step.x0_tilde, &step.x0_hat).unwrap() < 1e-12);
            let g = guidance_gradient(&x_t, &y, i, &plan, &model, &RangeNull, &OP, 0.0, mode).unwrap();
            let worst = to_f64_vec(&g).unwrap().iter().fold(0f64, |m, v| m.max(v.abs()));
            assert!(worst < 1e-9, "step {i} {mode:?}: {worst:e}");
        }
    }
}

#[test]
fn exact_lifting_matches_sing_zero() {
    let model = denoiser(DType::F32);
    let y = measurement(3, 8);
    let cfg = SingInnConfig {
        t_effective: 8,
        seed: 4,
        ..SingInnConfig::new(OP, 1.0)
    };
    let guided = restore_inn(&y, &model, &RangeNull, model.schedule(), &cfg).unwrap();
    let zero_cfg = SingZeroConfig {
        operator: OP,
        t_effective: 8,
        seed: 4,
        ..Default::default()
    };
    let plain = restore(&y, &model, model.schedule(), &zero_cfg).unwrap();
    assert!(max_abs_diff(&guided.image, &plain.image).unwrap() < 1e-9);
}

#[test]
fn one_evaluation_of_each_per_step() {
    let model = denoiser(DType::F32);
    let counting = CountingModel {
        inner: &model,
        calls: Cell::new(0),
    };
    let inn = CountingInn {
        inner: inn(DType::F32),
        forward: Cell::new(0),
        inverse: Cell::new(0),
    };
    let cfg = SingInnConfig {
        t_effective: 9,
        ..SingInnConfig::new(OP, -3.0)
    };
    let out = restore_inn(&measurement(5, 8), &counting, &inn, model.schedule(), &cfg).unwrap();
    assert_eq!((counting.calls.get(), inn.forward.get(), inn.inverse.get()), (9, 9, 9));
    assert_eq!((out.denoiser_evals, out.inn_forward_evals, out.inn_inverse_evals), (9, 9, 9));
}

#[test]
fn lifting_exactness_every_step() {
    let model = denoiser(DType::F32);
    let cfg = SingInnConfig {
        t_effective: 12,
        record_diagnostics: true,
        ..SingInnConfig::new(OP, -5.0)
    };
    let out = restore_inn(&measurement(6, 16), &model, &inn(DType::F32), model.schedule(), &cfg).unwrap();
    assert_eq!(out.steps.len(), 12);
    for s in &out.steps {
        assert!(s.lifting.unwrap() < 1e-4, "step {}: {:?}", s.step, s.lifting);
        assert!(s.guidance_norm.unwrap().is_finite());
    }
}

#[test]
fn out_of_range_snr_warns_but_runs() {
    let model = denoiser(DType::F32);
    let cfg = SingInnConfig {
        t_effective: 2,
        ..SingInnConfig::new(OP, 12.0)
    };
    let out = restore_inn(&measurement(7, 8), &model, &inn(DType::F32), model.schedule(), &cfg).unwrap();
    assert_eq!(out.warnings.len(), 1);
    assert!(out.warnings[0].contains("12"), "{}", out.warnings[0]);

    let inside = SingInnConfig {
        t_effective: 2,
        ..SingInnConfig::new(OP, 5.0)
    };
    let out = restore_inn(&measurement(7, 8), &model, &inn(DType::F32), model.schedule(), &inside).unwrap();
    assert!(out.warnings.is_empty());
}

#[test]
fn negative_zeta_is_rejected() {
    let model = denoiser(DType::F32);
    let cfg = SingInnConfig {
        zeta: -0.1,
        t_effective: 2,
        ..SingInnConfig::new(OP, 0.0)
    };
    assert!(restore_inn(&measurement(8, 8), &model, &inn(DType::F32), model.schedule(), &cfg).is_err());
}

#[test]
fn step_sizes_at_grid_points() {
    let grid = [-5.0, -3.0, -1.0, 1.0, 3.0, 5.0];
    let zetas: Vec<f64> = grid.iter().map(|&s| zeta_schedule(s)).collect();
    assert_eq!(zetas, [0.3, 0.3, 0.4, 0.4, 0.5, 0.5]);
}
