//! Conditional invertible network built from lifting steps.
//!
//! The input is split by an invertible space-to-depth transform into a
//! coarse part `c` (the first `coarse_channels` channels, which has the
//! measurement's shape) and a detail part `d`. Each coupling pair then runs
//! `d ← d − P(c, snr)` followed by `c ← c + U(d, snr)`; the inverse replays
//! the pairs backwards with the signs flipped, so invertibility holds for
//! every parameter value.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::AdamW;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::LinearDegradation;
use crate::nn::{adam, optimizer_step, scalar_f64, Conv2d, Linear, ParamStore};
use crate::rng::{normal_vec, rng_from_seed};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondInnConfig {
    pub channels: usize,
    /// Space-to-depth factor.
    pub scale: usize,
    pub coarse_channels: usize,
    pub hidden: usize,
    pub pairs: usize,
    pub blocks_per_net: usize,
    /// SNR interval (dB) seen in training; used to flag extrapolation.
    pub snr_range: (f64, f64),
}

impl CondInnConfig {
    /// Split matched to a degradation operator, so that the coarse part has
    /// the shape of `A x`.
    pub fn for_operator(op: &LinearDegradation, channels: usize) -> Result<Self> {
        let (scale, coarse_channels) = match op {
            LinearDegradation::MeanPool { scale } if *scale >= 2 => (*scale, channels),
            LinearDegradation::Decolorize if channels > 1 => (1, 1),
            _ => {
                return Err(Error::Config(format!(
                    "operator {op:?} leaves no detail channels for the invertible split"
                )))
            }
        };
        Ok(Self {
            channels,
            scale,
            coarse_channels,
            hidden: 32,
            pairs: 4,
            blocks_per_net: 2,
            snr_range: (-5.0, 5.0),
        })
    }

    pub fn split_channels(&self) -> usize {
        self.channels * self.scale * self.scale
    }

    pub fn detail_channels(&self) -> usize {
        self.split_channels() - self.coarse_channels
    }

    fn validate(&self) -> Result<()> {
        if self.scale == 0
            || self.hidden == 0
            || self.coarse_channels == 0
            || self.coarse_channels >= self.split_channels()
        {
            return Err(Error::Config(format!("invalid INN config {self:?}")));
        }
        Ok(())
    }
}

/// `(B, C, H, W) → (B, s²C, H/s, W/s)`; output channel `(dy·s + dx)·C + c`
/// holds pixel `(s·i + dy, s·j + dx)` of input channel `c`.
pub fn space_to_depth(x: &Tensor, s: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible by split factor {s}"
        )));
    }
    if s == 1 {
        return Ok(x.clone());
    }
    Ok(x.reshape((b, c, h / s, s, w / s, s))?
        .permute((0, 3, 5, 1, 2, 4))?
        .contiguous()?
        .reshape((b, s * s * c, h / s, w / s))?)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, s: usize) -> Result<Tensor> {
    let (b, cs, h, w) = x.dims4()?;
    if s == 0 || cs % (s * s) != 0 {
        return Err(Error::Config(format!("{cs} channels not divisible by {s}²")));
    }
    if s == 1 {
        return Ok(x.clone());
    }
    let c = cs / (s * s);
    Ok(x.reshape((b, s, s, c, h, w))?
        .permute((0, 3, 4, 1, 5, 2))?
        .contiguous()?
        .reshape((b, c, h * s, w * s))?)
}

/// `x + Conv₂(ReLU(Conv₁(x))) ⊙ α(snr)`, α per channel.
#[derive(Debug, Clone)]
pub struct CondBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    alpha: Linear,
}

impl CondBlock {
    fn new<R: Rng + ?Sized>(ps: &mut ParamStore, rng: &mut R, name: &str, width: usize) -> Result<Self> {
        let conv1 = Conv2d::new(ps, rng, &format!("{name}.conv1"), width, width, 3, 1, 1, 2f64.sqrt())?;
        let conv2 = Conv2d::new(ps, rng, &format!("{name}.conv2"), width, width, 3, 1, 1, 0.5)?;
        let w: Vec<f64> = normal_vec(rng, width).into_iter().map(|v| 0.1 * v).collect();
        let alpha = Linear::with_values(ps, &format!("{name}.alpha"), (w, [width, 1]), vec![1.0; width])?;
        Ok(Self { conv1, conv2, alpha })
    }

    /// `snr_norm`: `(B, 1)` tensor of `snr_db / 10`.
    pub fn forward(&self, x: &Tensor, snr_norm: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let alpha = self.alpha.forward(snr_norm)?.reshape((b, c, 1, 1))?;
        let branch = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        Ok((x + branch.broadcast_mul(&alpha)?)?)
    }
}

/// PNet / UNet: input projection, CondBlocks, output projection.
#[derive(Debug, Clone)]
pub struct CouplingNet {
    conv_in: Conv2d,
    blocks: Vec<CondBlock>,
    conv_out: Conv2d,
    out_name: String,
}

impl CouplingNet {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        hidden: usize,
        blocks: usize,
    ) -> Result<Self> {
        let conv_in = Conv2d::new(ps, rng, &format!("{name}.conv_in"), c_in, hidden, 3, 1, 1, 1.0)?;
        let blocks = (0..blocks)
            .map(|j| CondBlock::new(ps, rng, &format!("{name}.block{j}"), hidden))
            .collect::<Result<Vec<_>>>()?;
        let out_name = format!("{name}.conv_out");
        let conv_out = Conv2d::new(ps, rng, &out_name, hidden, c_out, 3, 1, 1, 0.1)?;
        Ok(Self {
            conv_in,
            blocks,
            conv_out,
            out_name,
        })
    }

    pub fn forward(&self, x: &Tensor, snr_norm: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(x)?;
        for block in &self.blocks {
            h = block.forward(&h, snr_norm)?;
        }
        self.conv_out.forward(&h)
    }

    pub fn blocks(&self) -> &[CondBlock] {
        &self.blocks
    }

    #[cfg(test)]
    pub(crate) fn project_in(&self, x: &Tensor) -> Result<Tensor> {
        self.conv_in.forward(x)
    }
}

/// Something that splits an image into coarse/detail parts under a channel
/// SNR and reassembles it exactly.
pub trait InvertibleSplit {
    fn forward(&self, x: &Tensor, snr_db: &[f64]) -> Result<(Tensor, Tensor)>;
    fn inverse(&self, c: &Tensor, d: &Tensor, snr_db: &[f64]) -> Result<Tensor>;
    fn snr_range(&self) -> (f64, f64);
}

impl<T: InvertibleSplit + ?Sized> InvertibleSplit for &T {
    fn forward(&self, x: &Tensor, snr_db: &[f64]) -> Result<(Tensor, Tensor)> {
        (**self).forward(x, snr_db)
    }
    fn inverse(&self, c: &Tensor, d: &Tensor, snr_db: &[f64]) -> Result<Tensor> {
        (**self).inverse(c, d, snr_db)
    }
    fn snr_range(&self) -> (f64, f64) {
        (**self).snr_range()
    }
}

#[derive(Debug, Clone)]
pub struct CondInn {
    config: CondInnConfig,
    params: ParamStore,
    /// `(PNet, UNet)` per coupling pair.
    pairs: Vec<(CouplingNet, CouplingNet)>,
}

impl CondInn {
    pub fn new(config: CondInnConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(dtype, &Device::Cpu);
        let mut rng = rng_from_seed(seed);
        let (cc, dc) = (config.coarse_channels, config.detail_channels());
        let pairs = (0..config.pairs)
            .map(|i| {
                let p = CouplingNet::new(&mut ps, &mut rng, &format!("pair{i}.pnet"), cc, dc, config.hidden, config.blocks_per_net)?;
                let u = CouplingNet::new(&mut ps, &mut rng, &format!("pair{i}.unet"), dc, cc, config.hidden, config.blocks_per_net)?;
                Ok((p, u))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            params: ps,
            pairs,
        })
    }

    pub fn config(&self) -> &CondInnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn pairs(&self) -> &[(CouplingNet, CouplingNet)] {
        &self.pairs
    }

    /// Zeros the output projection (weights and bias) of every coupling net,
    /// turning all couplings into the identity.
    pub fn zero_coupling_outputs(&self) -> Result<()> {
        for (p, u) in &self.pairs {
            for name in [&p.out_name, &u.out_name] {
                self.params.zero(&format!("{name}.weight"))?;
                self.params.zero(&format!("{name}.bias"))?;
            }
        }
        Ok(())
    }

    /// Sets every SNR gate to a constant `α = value` independent of SNR.
    pub fn set_gates(&self, weight_scale: f64, bias: f64) -> Result<()> {
        for name in self.params.names_where(|n| n.ends_with(".alpha.weight")) {
            let v = self.params.get(&name).expect("listed name");
            v.set(&v.ones_like()?.affine(weight_scale, 0.0)?)?;
        }
        for name in self.params.names_where(|n| n.ends_with(".alpha.bias")) {
            let v = self.params.get(&name).expect("listed name");
            v.set(&v.ones_like()?.affine(bias, 0.0)?)?;
        }
        Ok(())
    }

    pub(crate) fn snr_tensor(&self, snr_db: &[f64], batch: usize) -> Result<Tensor> {
        let v: Vec<f64> = match snr_db.len() {
            1 => vec![snr_db[0] / 10.0; batch],
            n if n == batch => snr_db.iter().map(|s| s / 10.0).collect(),
            n => return Err(Error::shape(batch, n)),
        };
        if v.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("SNR must be finite".into()));
        }
        Ok(Tensor::from_vec(v, (batch, 1), self.params.device())?.to_dtype(self.dtype())?)
    }

    /// Raw split without couplings.
    pub fn split(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.config.channels {
            return Err(Error::shape(self.config.channels, c));
        }
        let s = space_to_depth(x, self.config.scale)?;
        let cc = self.config.coarse_channels;
        let dc = self.config.detail_channels();
        Ok((s.narrow(1, 0, cc)?, s.narrow(1, cc, dc)?))
    }

    pub fn unsplit(&self, c: &Tensor, d: &Tensor) -> Result<Tensor> {
        let (bc, cc, hc, wc) = c.dims4()?;
        let (bd, dc, hd, wd) = d.dims4()?;
        if cc != self.config.coarse_channels
            || dc != self.config.detail_channels()
            || (bc, hc, wc) != (bd, hd, wd)
        {
            return Err(Error::Shape {
                expected: format!(
                    "coarse {} and detail {} channels on a shared grid",
                    self.config.coarse_channels,
                    self.config.detail_channels()
                ),
                actual: format!("{:?} and {:?}", c.dims(), d.dims()),
            });
        }
        depth_to_space(&Tensor::cat(&[c, d], 1)?, self.config.scale)
    }

    pub fn save(&self, path: &Path, training: &crate::diffusion::TrainingLog) -> Result<()> {
        crate::checkpoint::save(path, "inn", &self.config, training, &self.params)
    }

    pub fn load(path: &Path, dtype: DType) -> Result<(Self, crate::diffusion::TrainingLog)> {
        let (header, buf) = crate::checkpoint::read_header(path, "inn")?;
        let model = Self::new(header.config()?, dtype, 0)?;
        crate::checkpoint::load_params(&buf, &model.params)?;
        Ok((model, header.training()?))
    }
}

impl InvertibleSplit for CondInn {
    fn forward(&self, x: &Tensor, snr_db: &[f64]) -> Result<(Tensor, Tensor)> {
        let x = x.to_dtype(self.dtype())?;
        let snr = self.snr_tensor(snr_db, x.dim(0)?)?;
        let (mut c, mut d) = self.split(&x)?;
        for (p, u) in &self.pairs {
            d = (d - p.forward(&c, &snr)?)?;
            c = (c + u.forward(&d, &snr)?)?;
        }
        Ok((c, d))
    }

    fn inverse(&self, c: &Tensor, d: &Tensor, snr_db: &[f64]) -> Result<Tensor> {
        let mut c = c.to_dtype(self.dtype())?;
        let mut d = d.to_dtype(self.dtype())?;
        // validates shapes before running the nets
        self.unsplit(&c, &d)?;
        let snr = self.snr_tensor(snr_db, c.dim(0)?)?;
        for (p, u) in self.pairs.iter().rev() {
            c = (c - u.forward(&d, &snr)?)?;
            d = (d + p.forward(&c, &snr)?)?;
        }
        self.unsplit(&c, &d)
    }

    fn snr_range(&self) -> (f64, f64) {
        self.config.snr_range
    }
}

/// `(1/B) Σ_i ‖c_i − y_i‖²`; only the coarse output is supervised.
pub fn coarse_loss(inn: &CondInn, x: &Tensor, y: &Tensor, snr_db: &[f64]) -> Result<Tensor> {
    let (c, _) = inn.forward(x, snr_db)?;
    let y = y.to_dtype(inn.dtype())?;
    if c.dims() != y.dims() {
        return Err(Error::shape(c.dims(), y.dims()));
    }
    let b = x.dim(0)? as f64;
    Ok((c - y)?.sqr()?.sum_all()?.affine(1.0 / b, 0.0)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnTrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for InnTrainSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            lr: 5e-5,
            seed: 0,
        }
    }
}

pub struct InnTrainer {
    opt: AdamW,
}

impl InnTrainer {
    pub fn new(inn: &CondInn, lr: f64) -> Result<Self> {
        Ok(Self {
            opt: adam(inn.params(), lr)?,
        })
    }

    pub fn step(&mut self, inn: &CondInn, x: &Tensor, y: &Tensor, snr_db: &[f64]) -> Result<f64> {
        let loss = coarse_loss(inn, x, y, snr_db)?;
        let value = scalar_f64(&loss)?;
        optimizer_step(&mut self.opt, &loss)?;
        Ok(value)
    }
}

/// Fits the coarse output to fixed `(x_i, y_i, snr_i)` triples.
pub fn train_inn(
    inn: &CondInn,
    x: &Tensor,
    y: &Tensor,
    snr_db: &[f64],
    settings: &InnTrainSettings,
) -> Result<crate::diffusion::TrainingLog> {
    let n = x.dim(0)?;
    if n == 0 {
        return Err(Error::Config("INN training set is empty".into()));
    }
    if y.dim(0)? != n || snr_db.len() != n {
        return Err(Error::shape(n, (y.dim(0)?, snr_db.len())));
    }
    let mut trainer = InnTrainer::new(inn, settings.lr)?;
    let mut rng = rng_from_seed(settings.seed);
    let mut batches = crate::deepjscc::BatchSampler::new(n);
    let mut log = crate::diffusion::TrainingLog {
        seed: settings.seed,
        ..Default::default()
    };
    for _ in 0..settings.steps {
        let idx = batches.next(&mut rng, settings.batch_size);
        let xb = crate::deepjscc::gather(x, &idx)?;
        let yb = crate::deepjscc::gather(y, &idx)?;
        let sb: Vec<f64> = idx.iter().map(|&i| snr_db[i]).collect();
        log.push(trainer.step(inn, &xb, &yb, &sb)?);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{max_abs_diff, to_f64_vec};
    use crate::rng::randn;

    fn cfg() -> CondInnConfig {
        CondInnConfig {
            hidden: 8,
            ..CondInnConfig::for_operator(&LinearDegradation::MeanPool { scale: 2 }, 3).unwrap()
        }
    }

    fn x(seed: u64, dtype: DType) -> Tensor {
        randn(&mut rng_from_seed(seed), &[2, 3, 8, 8], dtype, &Device::Cpu).unwrap()
    }

    #[test]
    fn space_to_depth_layout() {
        let v: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let t = Tensor::from_vec(v, (1, 1, 4, 4), &Device::Cpu).unwrap();
        let s = space_to_depth(&t, 2).unwrap();
        assert_eq!(s.dims(), &[1, 4, 2, 2]);
        // channel 0 holds the top-left pixel of each 2×2 block
        assert_eq!(to_f64_vec(&s.narrow(1, 0, 1).unwrap()).unwrap(), vec![0.0, 2.0, 8.0, 10.0]);
        assert_eq!(to_f64_vec(&s.narrow(1, 3, 1).unwrap()).unwrap(), vec![5.0, 7.0, 13.0, 15.0]);
        assert_eq!(max_abs_diff(&depth_to_space(&s, 2).unwrap(), &t).unwrap(), 0.0);
        assert!(space_to_depth(&Tensor::zeros((1, 1, 3, 4), DType::F32, &Device::Cpu).unwrap(), 2).is_err());
    }

    #[test]
    fn identity_operator_rejected() {
        assert!(CondInnConfig::for_operator(&LinearDegradation::Identity, 3).is_err());
        let gray = CondInnConfig::for_operator(&LinearDegradation::Decolorize, 3).unwrap();
        assert_eq!((gray.scale, gray.coarse_channels, gray.detail_channels()), (1, 1, 2));
    }

    #[test]
    fn coarse_matches_measurement_shape() {
        let inn = CondInn::new(cfg(), DType::F32, 0).unwrap();
        let (c, d) = inn.forward(&x(1, DType::F32), &[0.0]).unwrap();
        assert_eq!(c.dims(), &[2, 3, 4, 4]);
        assert_eq!(d.dims(), &[2, 9, 4, 4]);
        assert_eq!(c.elem_count() + d.elem_count(), 2 * 3 * 64);
    }

    #[test]
    fn round_trip_random_weights() {
        let inn = CondInn::new(cfg(), DType::F32, 3).unwrap();
        let input = x(2, DType::F32);
        let (c, d) = inn.forward(&input, &[-3.0]).unwrap();
        let back = inn.inverse(&c, &d, &[-3.0]).unwrap();
        assert!(max_abs_diff(&back, &input).unwrap() < 1e-4);
    }

    #[test]
    fn zeroed_couplings_are_raw_split() {
        let inn = CondInn::new(cfg(), DType::F32, 4).unwrap();
        inn.zero_coupling_outputs().unwrap();
        let input = x(3, DType::F32);
        let (c, d) = inn.forward(&input, &[1.0]).unwrap();
        let (c0, d0) = inn.split(&input).unwrap();
        assert_eq!(max_abs_diff(&c, &c0).unwrap(), 0.0);
        assert_eq!(max_abs_diff(&d, &d0).unwrap(), 0.0);
        let back = inn.inverse(&c, &d, &[1.0]).unwrap();
        assert_eq!(max_abs_diff(&back, &inn.unsplit(&c0, &d0).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn inverse_depends_on_snr() {
        let inn = CondInn::new(cfg(), DType::F64, 5).unwrap();
        let (c, d) = inn.forward(&x(4, DType::F64), &[0.0]).unwrap();
        let a = inn.inverse(&c, &d, &[-4.0]).unwrap();
        let b = inn.inverse(&c, &d, &[4.0]).unwrap();
        assert!(max_abs_diff(&a, &b).unwrap() > 1e-8);
    }

    #[test]
    fn inverse_rejects_bad_shapes() {
        let inn = CondInn::new(cfg(), DType::F32, 0).unwrap();
        let c = Tensor::zeros((1, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let d = Tensor::zeros((1, 8, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(inn.inverse(&c, &d, &[0.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn residual_identity_cases() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new(DType::F64, &dev);
        let block = CondBlock::new(&mut ps, &mut rng_from_seed(0), "b", 2).unwrap();
        let input = randn(&mut rng_from_seed(1), &[1, 2, 4, 4], DType::F64, &dev).unwrap();
        let snr = Tensor::new(&[[0.3f64]], &dev).unwrap();
        assert!(max_abs_diff(&block.forward(&input, &snr).unwrap(), &input).unwrap() > 0.0);
        ps.zero("b.alpha.weight").unwrap();
        ps.zero("b.alpha.bias").unwrap();
        assert_eq!(max_abs_diff(&block.forward(&input, &snr).unwrap(), &input).unwrap(), 0.0);
        let mut ps = ParamStore::new(DType::F64, &dev);
        let block = CondBlock::new(&mut ps, &mut rng_from_seed(0), "b", 2).unwrap();
        ps.zero("b.conv2.weight").unwrap();
        assert_eq!(max_abs_diff(&block.forward(&input, &snr).unwrap(), &input).unwrap(), 0.0);
    }

    #[test]
    fn snr_reaches_every_block() {
        let inn = CondInn::new(cfg(), DType::F64, 6).unwrap();
        let input = x(5, DType::F64);
        let (c, d) = inn.split(&input).unwrap();
        let lo = inn.snr_tensor(&[-5.0], 2).unwrap();
        let hi = inn.snr_tensor(&[5.0], 2).unwrap();
        for (p, u) in inn.pairs() {
            for (net, inp) in [(p, &c), (u, &d)] {
                let h = net.project_in(inp).unwrap();
                for block in net.blocks() {
                    let a = block.forward(&h, &lo).unwrap();
                    let b = block.forward(&h, &hi).unwrap();
                    assert!(max_abs_diff(&a, &b).unwrap() > 0.0);
                }
            }
        }
    }

    #[test]
    fn per_sample_snr_labels() {
        let inn = CondInn::new(cfg(), DType::F32, 7).unwrap();
        let input = x(6, DType::F32);
        assert!(inn.forward(&input, &[1.0, 2.0]).is_ok());
        assert!(inn.forward(&input, &[1.0, 2.0, 3.0]).is_err());
        assert!(inn.forward(&input, &[f64::NAN]).is_err());
    }

    #[test]
    fn empty_training_set_rejected() {
        let inn = CondInn::new(cfg(), DType::F32, 0).unwrap();
        let x = Tensor::zeros((0, 3, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let y = Tensor::zeros((0, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(train_inn(&inn, &x, &y, &[], &InnTrainSettings::default()).is_err());
    }
}
