//! Convolutional autoencoder that maps images straight to channel symbols
//! and back, trained through the simulated channel.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{awgn_packed, normalize_power_packed, snr_to_sigma_sq, ChannelVector};
use crate::metrics::{mse_per_sample, PerceptualBackend};
use crate::nn::{adam, optimizer_step, scalar_f64, sigmoid, Conv2d, ConvTranspose2d, Gdn, Linear, ParamStore};
use crate::rng::rng_from_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsccConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Channel uses per source sample, ρ = k / (H·W·C).
    pub bcr: f64,
    /// Feature maps per convolutional stage.
    pub filters: usize,
    /// Number of stride-2 stages; H and W must be divisible by 2^depth.
    pub depth: usize,
    pub lambda_perceptual: f64,
    pub avg_power: f64,
    /// Feed `snr_db / 10` to the decoder alongside the received symbols.
    pub snr_side_input: bool,
}

impl Default for JsccConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 3,
            bcr: 0.0052,
            filters: 32,
            depth: 4,
            lambda_perceptual: 1.0,
            avg_power: crate::channel::DEFAULT_AVG_POWER,
            snr_side_input: false,
        }
    }
}

impl JsccConfig {
    pub fn source_dim(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// `k = floor(ρ·m)`.
    pub fn channel_uses(&self) -> usize {
        (self.bcr * self.source_dim() as f64 + 1e-9).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_uses() == 0 {
            return Err(Error::Config(format!(
                "bcr {} gives zero channel uses for {}x{}x{}",
                self.bcr, self.height, self.width, self.channels
            )));
        }
        let f = 1usize << self.depth;
        if self.depth == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "image {}x{} must be divisible by 2^depth = {f} (depth >= 1)",
                self.height, self.width
            )));
        }
        if !(self.avg_power > 0.0) || self.filters == 0 || self.lambda_perceptual < 0.0 {
            return Err(Error::Config(format!("invalid jscc config {self:?}")));
        }
        Ok(())
    }
}

/// Training metadata stored with the model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JsccTrainingLog {
    pub snr_range: (f64, f64),
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub losses: Vec<f64>,
    /// EMA (0.9) of `losses`.
    pub smoothed: Vec<f64>,
    /// SNR and σ² drawn for each step's batch.
    pub snr_db: Vec<f64>,
    pub sigma_sq: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct JsccModel {
    config: JsccConfig,
    params: ParamStore,
    enc: Vec<(Conv2d, Gdn)>,
    enc_proj: Linear,
    dec_proj: Linear,
    dec: Vec<(Gdn, ConvTranspose2d)>,
}

impl JsccModel {
    pub fn new(config: JsccConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(dtype, &Device::Cpu);
        let mut rng = rng_from_seed(seed);
        let f = config.filters;
        let mut enc = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let c_in = if i == 0 { config.channels } else { f };
            enc.push((
                Conv2d::new(&mut ps, &mut rng, &format!("enc{i}.conv"), c_in, f, 3, 2, 1, 1.0)?,
                Gdn::new(&mut ps, &format!("enc{i}.gdn"), f, false)?,
            ));
        }
        let (bh, bw) = config.bottleneck_hw();
        let flat = f * bh * bw;
        let k2 = 2 * config.channel_uses();
        let enc_proj = Linear::new(&mut ps, &mut rng, "enc.proj", flat, k2, 1.0)?;
        let side = usize::from(config.snr_side_input);
        let dec_proj = Linear::new(&mut ps, &mut rng, "dec.proj", k2 + side, flat, 1.0)?;
        let mut dec = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let c_out = if i + 1 == config.depth { config.channels } else { f };
            dec.push((
                Gdn::new(&mut ps, &format!("dec{i}.igdn"), f, true)?,
                ConvTranspose2d::new(&mut ps, &mut rng, &format!("dec{i}.deconv"), f, c_out, 4, 2, 1)?,
            ));
        }
        Ok(Self {
            config,
            params: ps,
            enc,
            enc_proj,
            dec_proj,
            dec,
        })
    }

    pub fn config(&self) -> &JsccConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn channel_uses(&self) -> usize {
        self.config.channel_uses()
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let cfg = &self.config;
        if (c, h, w) != (cfg.channels, cfg.height, cfg.width) {
            return Err(Error::Config(format!(
                "image shape {c}x{h}x{w} does not match configured {}x{}x{}",
                cfg.channels, cfg.height, cfg.width
            )));
        }
        Ok(())
    }

    /// Raw encoder output `z̃`, shape `(B, 2k)`, before power normalization.
    pub fn encode_raw(&self, x: &Tensor) -> Result<Tensor> {
        self.check_image(x)?;
        let mut h = x.to_dtype(self.dtype())?;
        for (conv, gdn) in &self.enc {
            h = gdn.forward(&conv.forward(&h)?)?;
        }
        let b = h.dim(0)?;
        self.enc_proj.forward(&h.reshape((b, ()))?)
    }

    /// Power-normalized packed symbols, shape `(B, 2k)`.
    pub fn encode_packed(&self, x: &Tensor) -> Result<Tensor> {
        normalize_power_packed(&self.encode_raw(x)?, self.config.avg_power)
    }

    /// Decodes packed received symbols `(B, 2k)` into `[0, 1]` images.
    pub fn decode_packed(&self, z_hat: &Tensor, snr_db: f64) -> Result<Tensor> {
        let (b, n) = z_hat.dims2()?;
        if n != 2 * self.channel_uses() {
            return Err(Error::Config(format!(
                "received {n} packed values, expected {}",
                2 * self.channel_uses()
            )));
        }
        let mut z = z_hat.to_dtype(self.dtype())?;
        if self.config.snr_side_input {
            let s = Tensor::full(snr_db / 10.0, (b, 1), z.device())?.to_dtype(self.dtype())?;
            z = Tensor::cat(&[&z, &s], 1)?;
        }
        let (bh, bw) = self.config.bottleneck_hw();
        let mut h = self
            .dec_proj
            .forward(&z)?
            .reshape((b, self.config.filters, bh, bw))?;
        for (igdn, deconv) in &self.dec {
            h = deconv.forward(&igdn.forward(&h)?)?;
        }
        Ok(sigmoid(&h)?.clamp(0.0, 1.0)?)
    }

    /// Encodes a single `(1, C, H, W)` image into channel symbols.
    pub fn encode(&self, x: &Tensor) -> Result<ChannelVector> {
        if x.dim(0)? != 1 {
            return Err(Error::Config("encode takes a single image".into()));
        }
        let packed = crate::nn::to_f64_vec(&self.encode_packed(x)?)?;
        ChannelVector::from_packed(&packed)
    }

    pub fn decode(&self, z_hat: &ChannelVector, snr_db: f64) -> Result<Tensor> {
        if z_hat.len() != self.channel_uses() {
            return Err(Error::Config(format!(
                "received {} symbols, expected {}",
                z_hat.len(),
                self.channel_uses()
            )));
        }
        let packed = z_hat.to_packed();
        let n = packed.len();
        let t = Tensor::from_vec(packed, (1, n), &Device::Cpu)?;
        self.decode_packed(&t, snr_db)
    }

    /// Encoder → AWGN at `snr_db` → decoder, for a batch.
    pub fn transmit<R: Rng + ?Sized>(&self, x: &Tensor, snr_db: f64, rng: &mut R) -> Result<Tensor> {
        let z = self.encode_packed(x)?;
        let sigma_sq = snr_to_sigma_sq(snr_db, self.config.avg_power);
        let z_hat = awgn_packed(&z, sigma_sq, rng)?;
        self.decode_packed(&z_hat, snr_db)
    }

    pub fn save(&self, path: &Path, training: &JsccTrainingLog) -> Result<()> {
        crate::checkpoint::save(path, "jscc", &self.config, training, &self.params)
    }

    pub fn load(path: &Path, dtype: DType) -> Result<(Self, JsccTrainingLog)> {
        let (header, buf) = crate::checkpoint::read_header(path, "jscc")?;
        let model = Self::new(header.config()?, dtype, 0)?;
        crate::checkpoint::load_params(&buf, &model.params)?;
        Ok((model, header.training()?))
    }
}

impl JsccConfig {
    fn bottleneck_hw(&self) -> (usize, usize) {
        (self.height >> self.depth, self.width >> self.depth)
    }
}

/// `MSE(x̂, x) + λ · perceptual(x̂, x)`, averaged over the batch.
pub fn composite_loss(
    x_hat: &Tensor,
    x: &Tensor,
    lambda: f64,
    perceptual: &dyn PerceptualBackend,
) -> Result<Tensor> {
    if x_hat.dims() != x.dims() {
        return Err(Error::shape(x.dims(), x_hat.dims()));
    }
    let mse = mse_per_sample(x_hat, x)?.mean_all()?;
    if lambda == 0.0 {
        return Ok(mse);
    }
    let p = perceptual.distance(x_hat, x)?.mean_all()?;
    Ok((mse + p.affine(lambda, 0.0)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsccTrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub snr_range: (f64, f64),
    pub seed: u64,
}

impl Default for JsccTrainSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            lr: 1e-4,
            snr_range: (-5.0, 5.0),
            seed: 0,
        }
    }
}

/// Batches drawn without replacement from a reshuffled permutation.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub(crate) fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    pub(crate) fn next<R: Rng + ?Sized>(&mut self, rng: &mut R, batch: usize) -> Vec<usize> {
        let n = self.order.len();
        let batch = batch.min(n);
        if self.cursor + batch > n {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let out = self.order[self.cursor..self.cursor + batch].to_vec();
        self.cursor += batch;
        out
    }
}

pub(crate) fn gather(data: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    let ids = Tensor::from_vec(ids, idx.len(), data.device())?;
    Ok(data.index_select(&ids, 0)?)
}

/// Trains a fresh model end to end through the channel. Each step draws a
/// batch, one SNR uniformly from `snr_range`, and fresh channel noise.
pub fn train(
    config: JsccConfig,
    dataset: &Tensor,
    settings: &JsccTrainSettings,
    perceptual: &dyn PerceptualBackend,
    dtype: DType,
) -> Result<(JsccModel, JsccTrainingLog)> {
    let n = dataset.dim(0)?;
    if n == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let (lo, hi) = settings.snr_range;
    if !(lo <= hi) {
        return Err(Error::Config(format!("snr range [{lo}, {hi}] is empty")));
    }
    let model = JsccModel::new(config, dtype, crate::rng::derive_seed(settings.seed, &[0]))?;
    model.check_image(dataset)?;
    let data = dataset.to_dtype(dtype)?;
    let mut opt = adam(&model.params, settings.lr)?;
    let mut rng = rng_from_seed(crate::rng::derive_seed(settings.seed, &[1]));
    let mut batches = BatchSampler::new(n);
    let mut log = JsccTrainingLog {
        snr_range: settings.snr_range,
        batch_size: settings.batch_size,
        lr: settings.lr,
        seed: settings.seed,
        ..Default::default()
    };
    let avg_power = model.config.avg_power;
    let lambda = model.config.lambda_perceptual;
    for _ in 0..settings.steps {
        let idx = batches.next(&mut rng, settings.batch_size);
        let x = gather(&data, &idx)?;
        let snr = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let sigma_sq = snr_to_sigma_sq(snr, avg_power);
        let z = model.encode_packed(&x)?;
        let z_hat = awgn_packed(&z, sigma_sq, &mut rng)?;
        let x_hat = model.decode_packed(&z_hat, snr)?;
        let loss = composite_loss(&x_hat, &x, lambda, perceptual)?;
        let value = scalar_f64(&loss)?;
        optimizer_step(&mut opt, &loss)?;
        let smoothed = match log.smoothed.last() {
            Some(p) => 0.9 * p + 0.1 * value,
            None => value,
        };
        log.losses.push(value);
        log.smoothed.push(smoothed);
        log.snr_db.push(snr);
        log.sigma_sq.push(sigma_sq);
        log.steps += 1;
    }
    Ok((model, log))
}
