//! Minimal layer set on top of candle, with parameters initialized from
//! explicit seeds. Candle's own initializers draw from an unseeded thread
//! RNG, which would break run-to-run reproducibility.

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;

use crate::rng::normal_vec;
use crate::{Error, Result};

/// Ordered, named collection of trainable variables.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    entries: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            entries: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&t.to_dtype(self.dtype)?)?;
        let out = var.as_tensor().clone();
        self.entries.push((name.to_string(), var));
        Ok(out)
    }

    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
        name: &str,
        shape: &[usize],
        std: f64,
    ) -> Result<Tensor> {
        let n = shape.iter().product();
        let v: Vec<f64> = normal_vec(rng, n).into_iter().map(|x| x * std).collect();
        let t = Tensor::from_vec(v, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = Tensor::full(value, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn from_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites the named variable in place; every layer holding a handle
    /// to it observes the new value.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::shape(var.dims(), value.dims()));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn zero(&self, name: &str) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        var.set(&var.zeros_like()?)?;
        Ok(())
    }

    /// Names matching a predicate, in registration order.
    pub fn names_where(&self, pred: impl Fn(&str) -> bool) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(n, _)| pred(n))
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// Adam, as used for every trainable component (zero weight decay).
pub fn adam(params: &ParamStore, lr: f64) -> Result<AdamW> {
    let cfg = ParamsAdamW {
        lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    Ok(AdamW::new(params.vars(), cfg)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Weights drawn from N(0, gain² / fan_in).
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let weight = ps.normal(
            rng,
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            gain / fan_in.sqrt(),
        )?;
        let bias = ps.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.dim(0)?;
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64 / (stride * stride) as f64;
        let weight = ps.normal(
            rng,
            &format!("{name}.weight"),
            &[c_in, c_out, kernel, kernel],
            1.0 / fan_in.sqrt(),
        )?;
        let bias = ps.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.bias.dim(0)?;
        let y = x.conv_transpose2d(&self.weight, self.padding, 0, self.stride, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        gain: f64,
    ) -> Result<Self> {
        let weight = ps.normal(
            rng,
            &format!("{name}.weight"),
            &[d_out, d_in],
            gain / (d_in as f64).sqrt(),
        )?;
        let bias = ps.constant(&format!("{name}.bias"), &[d_out], 0.0)?;
        Ok(Self { weight, bias })
    }

    /// Registers a linear map with explicit initial values.
    pub fn with_values(
        ps: &mut ParamStore,
        name: &str,
        weight: (Vec<f64>, [usize; 2]),
        bias: Vec<f64>,
    ) -> Result<Self> {
        let n = bias.len();
        let weight = ps.from_values(&format!("{name}.weight"), &weight.1, weight.0)?;
        let bias = ps.from_values(&format!("{name}.bias"), &[n], bias)?;
        Ok(Self { weight, bias })
    }

    /// `x`: (B, d_in) → (B, d_out).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Generalized divisive normalization, `x / sqrt(β + Γ x²)` across channels,
/// or its multiplicative inverse form.
#[derive(Debug, Clone)]
pub struct Gdn {
    beta: Tensor,
    gamma: Tensor,
    inverse: bool,
}

impl Gdn {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, inverse: bool) -> Result<Self> {
        let beta = ps.constant(&format!("{name}.beta"), &[channels], 1.0)?;
        let mut g = vec![0.0; channels * channels];
        for i in 0..channels {
            g[i * channels + i] = 0.1f64.sqrt();
        }
        let gamma = ps.from_values(&format!("{name}.gamma"), &[channels, channels, 1, 1], g)?;
        Ok(Self {
            beta,
            gamma,
            inverse,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.beta.dim(0)?;
        let gamma = self.gamma.sqr()?;
        let beta = (self.beta.sqr()? + 1e-6)?.reshape((1, c, 1, 1))?;
        let norm = x
            .sqr()?
            .conv2d(&gamma, 0, 1, 1, 1)?
            .broadcast_add(&beta)?
            .sqrt()?;
        Ok(if self.inverse {
            (x * norm)?
        } else {
            (x / norm)?
        })
    }
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Largest absolute elementwise difference.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(a.dims(), b.dims()));
    }
    let d = (a.to_dtype(DType::F64)? - b.to_dtype(DType::F64)?)?
        .abs()?
        .flatten_all()?
        .max(D::Minus1)?;
    Ok(d.to_scalar::<f64>()?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Adam step against a scalar loss.
pub fn optimizer_step(opt: &mut AdamW, loss: &Tensor) -> Result<()> {
    opt.backward_step(loss)?;
    Ok(())
}
