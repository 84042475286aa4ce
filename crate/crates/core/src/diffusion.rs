//! Unconditional DDPM: variance schedule, closed-form forward noising,
//! x₀ prediction, the ancestral posterior step, and a small ε-prediction
//! network.
//!
//! Images enter this module in `[0, 1]` and are mapped to `[-1, 1]`
//! internally (see [`to_model_domain`]); samplers map back at the boundary.

use candle_core::{DType, Device, Tensor};
use candle_nn::AdamW;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::{mean_pool, pinv_replicate};
use crate::nn::{adam, optimizer_step, scalar_f64, Conv2d, Linear, ParamStore};
use crate::rng::{randn, rng_from_seed};
use crate::{Error, Result};

pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// β₁…β_T with the derived α_t and ᾱ_t. Timesteps are 1-based; ᾱ₀ = 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Linearly spaced β from `beta_start` to `beta_end` over `steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        let betas = match steps {
            0 => Vec::new(),
            1 => vec![beta_start],
            n => (0..n)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64)
                .collect(),
        };
        Self::from_betas(betas)
    }

    /// Number of steps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::Index(format!("timestep {t} outside 1..={}", self.len())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.betas[t - 1]
    }

    /// ᾱ_t, with ᾱ₀ = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// σ_t = sqrt((1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t).
    pub fn sigma(&self, t: usize) -> f64 {
        ((1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)) * self.beta(t)).sqrt()
    }

    /// Weights on `x_t` and `x̂₀` in the posterior mean.
    pub fn posterior_coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let c_xt = self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let c_x0 = ab_prev.sqrt() * self.beta(t) / (1.0 - ab);
        (c_xt, c_x0)
    }

    /// A shorter chain over `steps` evenly spaced timesteps of this schedule.
    pub fn respace(&self, steps: usize) -> Result<SamplingPlan> {
        let t_total = self.len();
        if steps == 0 || steps > t_total {
            return Err(Error::Config(format!(
                "effective steps must be in 1..={t_total}, got {steps}"
            )));
        }
        if steps == t_total {
            return Ok(SamplingPlan {
                schedule: self.clone(),
                timesteps: (1..=t_total).collect(),
            });
        }
        let timesteps: Vec<usize> = (1..=steps).map(|i| (i * t_total).div_ceil(steps)).collect();
        let mut betas = Vec::with_capacity(steps);
        let mut prev = 1.0;
        for &t in &timesteps {
            let ab = self.alpha_bar(t);
            betas.push(1.0 - ab / prev);
            prev = ab;
        }
        Ok(SamplingPlan {
            schedule: Self::from_betas(betas)?,
            timesteps,
        })
    }
}

/// A (possibly respaced) chain: `schedule` drives the update arithmetic,
/// `timesteps[i-1]` is the training timestep fed to the network at step `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    pub schedule: NoiseSchedule,
    pub timesteps: Vec<usize>,
}

impl SamplingPlan {
    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn model_timestep(&self, i: usize) -> usize {
        self.timesteps[i - 1]
    }
}

pub fn to_model_domain(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(2.0, -1.0)?)
}

pub fn from_model_domain(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.5)?)
}

/// `x_t = sqrt(ᾱ_t) x₀ + sqrt(1 − ᾱ_t) ε`.
pub fn forward_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    schedule.check(t)?;
    if x0.dims() != eps.dims() {
        return Err(Error::shape(x0.dims(), eps.dims()));
    }
    let ab = schedule.alpha_bar(t);
    Ok((x0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?)
}

/// Per-sample variant of [`forward_sample`]; `ts[i]` applies to batch row `i`.
pub fn forward_sample_batch(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let b = x0.dim(0)?;
    if ts.len() != b {
        return Err(Error::shape(b, ts.len()));
    }
    for &t in ts {
        schedule.check(t)?;
    }
    let dev = x0.device();
    let coef = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
        let v: Vec<f64> = ts.iter().map(|&t| f(schedule.alpha_bar(t))).collect();
        Ok(Tensor::from_vec(v, (b, 1, 1, 1), dev)?.to_dtype(x0.dtype())?)
    };
    let a = coef(&|ab| ab.sqrt())?;
    let s = coef(&|ab| (1.0 - ab).sqrt())?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&s)?)?)
}

/// Inverts the forward noising at a noise estimate:
/// `x₀ = (x_t − sqrt(1 − ᾱ_t) ε) / sqrt(ᾱ_t)`.
pub fn x0_from_eps(x_t: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    Ok((x_t - eps.affine((1.0 - alpha_bar).sqrt(), 0.0)?)?.affine(1.0 / alpha_bar.sqrt(), 0.0)?)
}

/// x₀ estimate at chain step `i` of `plan`.
pub fn predict_x0<M: NoisePredictor + ?Sized>(
    model: &M,
    x_t: &Tensor,
    i: usize,
    plan: &SamplingPlan,
) -> Result<Tensor> {
    plan.schedule.check(i)?;
    let eps = model.predict_noise(x_t, &[plan.model_timestep(i)])?;
    x0_from_eps(x_t, &eps, plan.schedule.alpha_bar(i))
}

/// `x_{t−1} = c₁ x_t + c₂ x̂₀ + σ_t z`; pass `z = None` for the final step.
pub fn posterior_step(
    x_t: &Tensor,
    x0_hat: &Tensor,
    t: usize,
    z: Option<&Tensor>,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    schedule.check(t)?;
    let (c_xt, c_x0) = schedule.posterior_coefficients(t);
    let mean = (x_t.affine(c_xt, 0.0)? + x0_hat.affine(c_x0, 0.0)?)?;
    match z {
        Some(z) => Ok((mean + z.affine(schedule.sigma(t), 0.0)?)?),
        None => Ok(mean),
    }
}

/// Anything that predicts the noise in `x_t` (model domain). `timesteps`
/// has one entry per batch row, or a single entry shared by the batch.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, timesteps: &[usize]) -> Result<Tensor>;
}

impl<T: NoisePredictor + ?Sized> NoisePredictor for &T {
    fn predict_noise(&self, x_t: &Tensor, timesteps: &[usize]) -> Result<Tensor> {
        (**self).predict_noise(x_t, timesteps)
    }
}

/// Plain ancestral sampling from `x_T ~ N(0, I)`; returns `[0, 1]`-domain
/// images (unclamped) and the number of network evaluations.
pub fn sample<M: NoisePredictor + ?Sized>(
    model: &M,
    plan: &SamplingPlan,
    shape: &[usize],
    dtype: DType,
    seed: u64,
) -> Result<(Tensor, usize)> {
    let mut rng = rng_from_seed(seed);
    let dev = Device::Cpu;
    let mut x = randn(&mut rng, shape, dtype, &dev)?;
    let mut evals = 0;
    for i in (1..=plan.len()).rev() {
        let z = if i > 1 {
            Some(randn(&mut rng, shape, dtype, &dev)?)
        } else {
            None
        };
        let x0 = predict_x0(model, &x, i, plan)?;
        evals += 1;
        x = posterior_step(&x, &x0, i, z.as_ref(), &plan.schedule)?;
    }
    Ok((from_model_domain(&x)?, evals))
}

/// How the network output is turned into the noise estimate ε̂.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    /// The network output is ε̂.
    Epsilon,
    /// The network `F` predicts a scaled clean image with input/skip/output
    /// scalings (σ_data = 0.5); with `a = ᾱ_t` and `v = 1 − a + a·σ²_data`,
    /// `ε̂ = √(1−a)/v · x_t − σ_data·√(a/v) · F(x_t/√v, t)`.
    /// `F ≡ 0` is the Gaussian-optimal denoiser, and `∂x̂₀/∂x_t` stays
    /// bounded as `ᾱ_t → 0`.
    #[default]
    Preconditioned,
}

/// Data standard deviation assumed by [`Parametrization::Preconditioned`].
pub const SIGMA_DATA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub width: usize,
    pub time_dim: usize,
    /// Start from an all-zero output layer (`F ≡ 0` before training).
    pub zero_init_output: bool,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub parametrization: Parametrization,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            width: 32,
            time_dim: 32,
            zero_init_output: true,
            timesteps: DEFAULT_TIMESTEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            parametrization: Parametrization::default(),
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    temb: Linear,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(ps: &mut ParamStore, rng: &mut R, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(ps, rng, &format!("{name}.conv1"), width, width, 3, 1, 1, 2f64.sqrt())?,
            conv2: Conv2d::new(ps, rng, &format!("{name}.conv2"), width, width, 3, 1, 1, 0.5)?,
            temb: Linear::new(ps, rng, &format!("{name}.temb"), width, width, 1.0)?,
        })
    }

    fn forward(&self, h: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let (b, c) = temb.dims2()?;
        let t = self.temb.forward(temb)?.reshape((b, c, 1, 1))?;
        let inner = self.conv1.forward(&h.silu()?)?.broadcast_add(&t)?;
        let out = self.conv2.forward(&inner.silu()?)?;
        Ok((h + out)?)
    }
}

/// Two-resolution residual CNN with a sinusoidal timestep embedding.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    params: ParamStore,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    res_hi: ResBlock,
    res_lo: ResBlock,
    res_out: ResBlock,
    conv_out: Conv2d,
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig, dtype: DType, seed: u64) -> Result<Self> {
        if config.width == 0 || config.channels == 0 || config.time_dim < 2 || !config.time_dim.is_multiple_of(2) {
            return Err(Error::Config(format!("invalid denoiser config {config:?}")));
        }
        let schedule = NoiseSchedule::linear(config.timesteps, config.beta_start, config.beta_end)?;
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(dtype, &dev);
        let mut rng = rng_from_seed(seed);
        let w = config.width;
        let time1 = Linear::new(&mut ps, &mut rng, "time.fc1", config.time_dim, w, 1.0)?;
        let time2 = Linear::new(&mut ps, &mut rng, "time.fc2", w, w, 1.0)?;
        let conv_in = Conv2d::new(&mut ps, &mut rng, "conv_in", config.channels, w, 3, 1, 1, 1.0)?;
        let res_hi = ResBlock::new(&mut ps, &mut rng, "res_hi", w)?;
        let res_lo = ResBlock::new(&mut ps, &mut rng, "res_lo", w)?;
        let res_out = ResBlock::new(&mut ps, &mut rng, "res_out", w)?;
        let conv_out = Conv2d::new(&mut ps, &mut rng, "conv_out", w, config.channels, 3, 1, 1, 1.0)?;
        if config.zero_init_output {
            ps.zero("conv_out.weight")?;
        }
        Ok(Self {
            config,
            schedule,
            params: ps,
            time1,
            time2,
            conv_in,
            res_hi,
            res_lo,
            res_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    fn embed_time(&self, ts: &[usize], batch: usize) -> Result<Tensor> {
        let half = self.config.time_dim / 2;
        let rows: Vec<usize> = if ts.len() == 1 {
            vec![ts[0]; batch]
        } else {
            ts.to_vec()
        };
        let mut v = Vec::with_capacity(batch * half * 2);
        for &t in &rows {
            for j in 0..half {
                let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
                v.push((t as f64 * freq).sin());
            }
            for j in 0..half {
                let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
                v.push((t as f64 * freq).cos());
            }
        }
        let e = Tensor::from_vec(v, (batch, half * 2), self.params.device())?.to_dtype(self.dtype())?;
        self.time2.forward(&self.time1.forward(&e)?.silu()?)
    }

    pub fn forward(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let (b, c, h, w) = x_t.dims4()?;
        if c != self.config.channels {
            return Err(Error::shape(self.config.channels, c));
        }
        if ts.len() != 1 && ts.len() != b {
            return Err(Error::shape(b, ts.len()));
        }
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!("denoiser needs even spatial dims, got {h}x{w}")));
        }
        if let Some(&t) = ts.iter().find(|&&t| t == 0 || t > self.schedule.len()) {
            return Err(Error::Index(format!("timestep {t} outside 1..={}", self.schedule.len())));
        }
        let temb = self.embed_time(ts, b)?.silu()?;
        let x_t = x_t.to_dtype(self.dtype())?;
        match self.config.parametrization {
            Parametrization::Epsilon => self.network(&x_t, &temb),
            Parametrization::Preconditioned => {
                let per_sample = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
                    let v: Vec<f64> = (0..b)
                        .map(|i| f(self.schedule.alpha_bar(if ts.len() == 1 { ts[0] } else { ts[i] })))
                        .collect();
                    Ok(Tensor::from_vec(v, (b, 1, 1, 1), x_t.device())?.to_dtype(x_t.dtype())?)
                };
                let var = |a: f64| 1.0 - a + a * SIGMA_DATA * SIGMA_DATA;
                let c_in = per_sample(&|a| 1.0 / var(a).sqrt())?;
                let c_skip = per_sample(&|a| (1.0 - a).sqrt() / var(a))?;
                let c_out = per_sample(&|a| -SIGMA_DATA * (a / var(a)).sqrt())?;
                let f = self.network(&x_t.broadcast_mul(&c_in)?, &temb)?;
                Ok((x_t.broadcast_mul(&c_skip)? + f.broadcast_mul(&c_out)?)?)
            }
        }
    }

    fn network(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h0 = self.conv_in.forward(x)?;
        let hi = self.res_hi.forward(&h0, temb)?;
        let lo = self.res_lo.forward(&mean_pool(&hi, 2)?, temb)?;
        let merged = (hi + pinv_replicate(&lo, 2)?)?;
        let out = self.res_out.forward(&merged, temb)?;
        self.conv_out.forward(&out.silu()?)
    }

    pub fn save(&self, path: &std::path::Path, training: &TrainingLog) -> Result<()> {
        crate::checkpoint::save(path, "ddpm", &self.config, training, &self.params)
    }

    pub fn load(path: &std::path::Path, dtype: DType) -> Result<(Self, TrainingLog)> {
        let (header, buf) = crate::checkpoint::read_header(path, "ddpm")?;
        let config: DenoiserConfig = header.config()?;
        let model = Self::new(config, dtype, 0)?;
        crate::checkpoint::load_params(&buf, &model.params)?;
        Ok((model, header.training()?))
    }
}

impl NoisePredictor for DenoiserModel {
    fn predict_noise(&self, x_t: &Tensor, timesteps: &[usize]) -> Result<Tensor> {
        self.forward(x_t, timesteps)
    }
}

/// One entry per optimizer step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub losses: Vec<f64>,
    /// Exponential moving average of `losses` (factor 0.9).
    pub smoothed: Vec<f64>,
    pub steps: usize,
    pub seed: u64,
}

impl TrainingLog {
    pub fn push(&mut self, loss: f64) {
        let s = match self.smoothed.last() {
            Some(prev) => 0.9 * prev + 0.1 * loss,
            None => loss,
        };
        self.losses.push(loss);
        self.smoothed.push(s);
        self.steps += 1;
    }
}

/// Noise-prediction training with Adam; each step draws fresh `t` and `ε`
/// from a seeded stream.
pub struct DdpmTrainer {
    opt: AdamW,
    rng: rand_chacha::ChaCha8Rng,
}

impl DdpmTrainer {
    pub fn new(model: &DenoiserModel, lr: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            opt: adam(model.params(), lr)?,
            rng: rng_from_seed(seed),
        })
    }

    /// Loss `mean((ε − ε_θ(x_t, t))²)` on a `[0, 1]`-domain batch, then one update.
    pub fn train_step(&mut self, model: &DenoiserModel, x0: &Tensor) -> Result<f64> {
        let b = x0.dim(0)?;
        if b == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        let loss = self.loss(model, x0)?;
        let value = scalar_f64(&loss)?;
        optimizer_step(&mut self.opt, &loss)?;
        Ok(value)
    }

    fn loss(&mut self, model: &DenoiserModel, x0: &Tensor) -> Result<Tensor> {
        let b = x0.dim(0)?;
        let big_t = model.schedule().len();
        let ts: Vec<usize> = (0..b).map(|_| self.rng.random_range(1..=big_t)).collect();
        let x0 = to_model_domain(&x0.to_dtype(model.dtype())?)?;
        let eps = randn(&mut self.rng, x0.dims(), model.dtype(), x0.device())?;
        let x_t = forward_sample_batch(&x0, &ts, &eps, model.schedule())?;
        let pred = model.forward(&x_t, &ts)?;
        Ok((eps - pred)?.sqr()?.mean_all()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{max_abs_diff, to_f64_vec};

    fn small_config() -> DenoiserConfig {
        DenoiserConfig {
            channels: 1,
            width: 8,
            time_dim: 8,
            zero_init_output: false,
            timesteps: 50,
            ..Default::default()
        }
    }

    #[test]
    fn constant_beta_alpha_bar() {
        let s = NoiseSchedule::from_betas(vec![0.01; 5]).unwrap();
        assert!((s.alpha_bar(2) - 0.9801).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn schedule_rejects_bad_betas() {
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
    }

    #[test]
    fn alpha_bar_strictly_decreasing_and_sigma_finite() {
        let s = NoiseSchedule::linear(1000, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        for t in 1..=1000 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.alpha_bar(t) > 0.0);
            assert!(s.sigma(t).is_finite());
        }
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn respacing_keeps_endpoints() {
        let s = NoiseSchedule::linear(1000, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let plan = s.respace(50).unwrap();
        assert_eq!(plan.len(), 50);
        assert_eq!(plan.model_timestep(50), 1000);
        assert_eq!(plan.model_timestep(1), 20);
        for i in 1..=50 {
            assert!((plan.schedule.alpha_bar(i) - s.alpha_bar(plan.model_timestep(i))).abs() < 1e-12);
        }
        assert_eq!(s.respace(1000).unwrap().schedule, s);
        assert!(s.respace(0).is_err());
        assert!(s.respace(1001).is_err());
    }

    #[test]
    fn forward_sample_zero_noise() {
        let s = NoiseSchedule::from_betas(vec![0.01; 3]).unwrap();
        let x0 = Tensor::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let eps = x0.zeros_like().unwrap();
        let xt = to_f64_vec(&forward_sample(&x0, 2, &eps, &s).unwrap()).unwrap();
        assert!((xt[0] - 0.99).abs() < 1e-15);
        assert!((xt[1] + 1.98).abs() < 1e-15);
        assert!(matches!(forward_sample(&x0, 4, &eps, &s), Err(Error::Index(_))));
        assert!(matches!(forward_sample(&x0, 0, &eps, &s), Err(Error::Index(_))));
    }

    #[test]
    fn x0_inversion_recovers_input() {
        let s = NoiseSchedule::linear(100, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let mut rng = rng_from_seed(5);
        let x0 = randn(&mut rng, &[2, 3, 4, 4], DType::F32, &Device::Cpu).unwrap();
        let eps = randn(&mut rng, &[2, 3, 4, 4], DType::F32, &Device::Cpu).unwrap();
        for t in [1, 50, 100] {
            let xt = forward_sample(&x0, t, &eps, &s).unwrap();
            let back = x0_from_eps(&xt, &eps, s.alpha_bar(t)).unwrap();
            // float32 cancellation grows as sqrt(ᾱ_t) shrinks
            assert!(max_abs_diff(&back, &x0).unwrap() < 1e-5 / s.alpha_bar(t).sqrt());
        }
        let xt = randn(&mut rng, &[1, 3, 4, 4], DType::F64, &Device::Cpu).unwrap();
        let zero = x0_from_eps(&xt, &xt.zeros_like().unwrap(), s.alpha_bar(7)).unwrap();
        let expect = xt.affine(1.0 / s.alpha_bar(7).sqrt(), 0.0).unwrap();
        assert!(max_abs_diff(&zero, &expect).unwrap() < 1e-12);
    }

    #[test]
    fn posterior_mean_tracks_noise_free_trajectory() {
        // c₁·sqrt(ᾱ_t) + c₂ = sqrt(ᾱ_{t−1}): a noise-free x_t = sqrt(ᾱ_t)·x₀
        // steps to sqrt(ᾱ_{t−1})·x₀.
        let s = NoiseSchedule::linear(1000, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        for t in 1..=1000 {
            let (a, b) = s.posterior_coefficients(t);
            let lhs = a * s.alpha_bar(t).sqrt() + b;
            assert!((lhs - s.alpha_bar(t - 1).sqrt()).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn posterior_weight_sum_closed_form() {
        // with p = sqrt(α_t), q = sqrt(ᾱ_{t−1}) the weights sum to (p + q) / (1 + p·q),
        // which is exactly 1 only at t = 1
        let s = NoiseSchedule::linear(1000, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        for t in 1..=1000 {
            let (a, b) = s.posterior_coefficients(t);
            let (p, q) = (s.alpha(t).sqrt(), s.alpha_bar(t - 1).sqrt());
            assert!((a + b - (p + q) / (1.0 + p * q)).abs() < 1e-12, "t={t}");
        }
        let (a, b) = s.posterior_coefficients(1);
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_step_is_linear_without_noise() {
        let s = NoiseSchedule::linear(20, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap();
        let mut rng = rng_from_seed(1);
        let xt = randn(&mut rng, &[1, 1, 4, 4], DType::F64, &Device::Cpu).unwrap();
        let x0 = randn(&mut rng, &[1, 1, 4, 4], DType::F64, &Device::Cpu).unwrap();
        let a = 3.5;
        let lhs = posterior_step(&xt.affine(a, 0.0).unwrap(), &x0.affine(a, 0.0).unwrap(), 7, None, &s).unwrap();
        let rhs = posterior_step(&xt, &x0, 7, None, &s).unwrap().affine(a, 0.0).unwrap();
        assert!(max_abs_diff(&lhs, &rhs).unwrap() < 1e-12);
        // at t = 1 the step returns x̂₀ itself
        let out = posterior_step(&xt, &x0, 1, None, &s).unwrap();
        assert!(max_abs_diff(&out, &x0).unwrap() < 1e-12);
    }

    #[test]
    fn zero_output_model_has_unit_loss() {
        let cfg = DenoiserConfig {
            zero_init_output: true,
            parametrization: Parametrization::Epsilon,
            ..small_config()
        };
        let model = DenoiserModel::new(cfg, DType::F32, 0).unwrap();
        // the zeroed head also has zero bias, so ε̂ ≡ 0 and loss ≈ E[ε²] = 1
        let mut trainer = DdpmTrainer::new(&model, 1e-4, 3).unwrap();
        let x0 = Tensor::full(0.5f32, (64, 1, 8, 8), &Device::Cpu).unwrap();
        let loss = trainer.train_step(&model, &x0).unwrap();
        assert!((loss - 1.0).abs() < 0.05, "loss {loss}");
    }

    #[test]
    fn preconditioned_zero_network_is_gaussian_denoiser() {
        let cfg = DenoiserConfig {
            zero_init_output: true,
            parametrization: Parametrization::Preconditioned,
            ..small_config()
        };
        let model = DenoiserModel::new(cfg, DType::F64, 0).unwrap();
        let x = Tensor::full(0.8f64, (2, 1, 4, 4), &Device::Cpu).unwrap();
        for t in [1usize, 25, 50] {
            let a = model.schedule().alpha_bar(t);
            let v = 1.0 - a + a * SIGMA_DATA * SIGMA_DATA;
            let eps = to_f64_vec(&model.forward(&x, &[t]).unwrap()).unwrap();
            assert!(eps.iter().all(|e| (e - 0.8 * (1.0 - a).sqrt() / v).abs() < 1e-12));
            // x̂₀ = σ²_data·√a/v · x_t stays bounded as a → 0
            let x0 = x0_from_eps(&x, &model.forward(&x, &[t]).unwrap(), a).unwrap();
            let want = 0.8 * SIGMA_DATA * SIGMA_DATA * a.sqrt() / v;
            assert!(to_f64_vec(&x0).unwrap().iter().all(|v| (v - want).abs() < 1e-9));
        }
        assert!(model.forward(&x, &[0]).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let model = DenoiserModel::new(small_config(), DType::F32, 9).unwrap();
            let mut trainer = DdpmTrainer::new(&model, 1e-3, 4).unwrap();
            let x0 = Tensor::full(0.3f32, (2, 1, 8, 8), &Device::Cpu).unwrap();
            (0..5).map(|_| trainer.train_step(&model, &x0).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn ancestral_sampling_runs_full_chain() {
        let model = DenoiserModel::new(small_config(), DType::F32, 2).unwrap();
        let plan = model.schedule().respace(50).unwrap();
        let (x, evals) = sample(&model, &plan, &[1, 1, 8, 8], DType::F32, 1).unwrap();
        assert_eq!(evals, 50);
        assert!(to_f64_vec(&x).unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn output_shape_matches_input() {
        let model = DenoiserModel::new(small_config(), DType::F64, 2).unwrap();
        let x = Tensor::zeros((3, 1, 6, 10), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(model.forward(&x, &[4, 5, 6]).unwrap().dims(), &[3, 1, 6, 10]);
        assert!(model.forward(&x, &[4, 5]).is_err());
    }
}
