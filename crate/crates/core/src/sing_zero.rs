//! Zero-shot null-space sampling: at every step the denoiser's x₀ estimate
//! has its range component replaced by `A† y`, so only the null-space part
//! is synthesized by the diffusion prior.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::degradation::LinearDegradation;
use crate::diffusion::{
    from_model_domain, posterior_step, to_model_domain, x0_from_eps, NoisePredictor, NoiseSchedule,
    SamplingPlan, DEFAULT_TIMESTEPS,
};
use crate::nn::max_abs_diff;
use crate::rng::{randn, rng_from_seed};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingZeroConfig {
    pub operator: LinearDegradation,
    /// Channels of the restored image (needed when `A` drops channels).
    pub channels: usize,
    pub t_effective: usize,
    pub seed: u64,
    /// Record per-step residuals and the final x₀ estimate.
    pub record_diagnostics: bool,
}

impl Default for SingZeroConfig {
    fn default() -> Self {
        Self {
            operator: LinearDegradation::MeanPool { scale: 2 },
            channels: 3,
            t_effective: DEFAULT_TIMESTEPS,
            seed: 0,
            record_diagnostics: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Chain step index (counts down to 1).
    pub step: usize,
    /// `‖A x̂_{0,t} − y‖∞` in the `[0, 1]` domain.
    pub consistency: f64,
    /// `‖coarse(INN_fwd(x̃_{0,t})) − y‖∞`, SING-INN only.
    pub lifting: Option<f64>,
    /// `‖∇_{x_t}‖₂` of the guidance objective, SING-INN only.
    pub guidance_norm: Option<f64>,
}

/// Sampler output. `image` is unclamped (clamping would break `A x̂ = y`)
/// and in f64: the chain state is kept in double precision whatever the
/// model precision, so consistency holds even when an untrained denoiser
/// drives the estimates far outside `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Restoration {
    pub image: Tensor,
    pub denoiser_evals: usize,
    pub inn_forward_evals: usize,
    pub inn_inverse_evals: usize,
    pub steps: Vec<StepDiagnostics>,
    /// Final rectified x₀ estimate `x̂_{0,1}`, `[0, 1]` domain (diagnostics only).
    pub final_x0: Option<Tensor>,
    /// Raw (unrectified) x₀ estimate `x_{0,1}`, `[0, 1]` domain (diagnostics only).
    pub final_raw_x0: Option<Tensor>,
    pub warnings: Vec<String>,
}

impl Restoration {
    /// The image clamped to `[0, 1]` for display and scoring.
    pub fn clamped(&self) -> Result<Tensor> {
        Ok(self.image.clamp(0.0, 1.0)?)
    }
}

/// Full-resolution shape `(B, C, H, W)` implied by a measurement.
/// Precision of the sampler state.
pub const CHAIN_DTYPE: DType = DType::F64;

pub(crate) fn signal_shape(op: &LinearDegradation, y: &Tensor, channels: usize) -> Result<Vec<usize>> {
    let (b, c, h, w) = y.dims4()?;
    let s = op.scale();
    let full = (channels, h * s, w * s);
    if op.measurement_shape(full)? != (c, h, w) {
        return Err(Error::Config(format!(
            "measurement {c}x{h}x{w} is incompatible with operator {op:?} on {channels}-channel images"
        )));
    }
    Ok(vec![b, channels, h * s, w * s])
}

pub(crate) fn plan_for(schedule: &NoiseSchedule, t_effective: usize) -> Result<SamplingPlan> {
    if t_effective == 0 {
        return Err(Error::Config("t_effective must be >= 1".into()));
    }
    schedule.respace(t_effective)
}

/// Restores a full-resolution image from the measurement `y` (in `[0, 1]`).
pub fn restore<M: NoisePredictor + ?Sized>(
    y: &Tensor,
    model: &M,
    schedule: &NoiseSchedule,
    cfg: &SingZeroConfig,
) -> Result<Restoration> {
    let op = &cfg.operator;
    let shape = signal_shape(op, y, cfg.channels)?;
    let plan = plan_for(schedule, cfg.t_effective)?;
    let dtype = CHAIN_DTYPE;
    let dev = y.device().clone();
    let y = y.to_dtype(dtype)?;
    let y_m = to_model_domain(&y)?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut x = randn(&mut rng, &shape, dtype, &dev)?;
    let mut out = Restoration {
        image: x.clone(),
        denoiser_evals: 0,
        inn_forward_evals: 0,
        inn_inverse_evals: 0,
        steps: Vec::new(),
        final_x0: None,
        final_raw_x0: None,
        warnings: Vec::new(),
    };
    for i in (1..=plan.len()).rev() {
        let z = if i > 1 {
            Some(randn(&mut rng, &shape, dtype, &dev)?)
        } else {
            None
        };
        let eps = model
            .predict_noise(&x, &[plan.model_timestep(i)])?
            .to_dtype(dtype)?;
        out.denoiser_evals += 1;
        let x0 = x0_from_eps(&x, &eps, plan.schedule.alpha_bar(i))?;
        let x0_hat = op.rectify(&x0, &y_m)?;
        if cfg.record_diagnostics {
            let consistency = max_abs_diff(&op.apply(&x0_hat)?, &y_m)? / 2.0;
            out.steps.push(StepDiagnostics {
                step: i,
                consistency,
                ..Default::default()
            });
            if i == 1 {
                out.final_x0 = Some(from_model_domain(&x0_hat)?);
                out.final_raw_x0 = Some(from_model_domain(&x0)?);
            }
        }
        x = posterior_step(&x, &x0_hat, i, z.as_ref(), &plan.schedule)?;
    }
    out.image = from_model_domain(&x)?;
    Ok(out)
}
