//! PSNR and a deep-feature perceptual distance.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize, Serializer};

use crate::degradation::mean_pool;
use crate::nn::to_f64_vec;
use crate::rng::{normal_vec, rng_from_seed};
use crate::{Error, Result};

/// Per-sample mean squared error, shape `(B,)`.
pub fn mse_per_sample(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(Error::shape(x.dims(), y.dims()));
    }
    let b = x.dim(0)?;
    Ok((x - y)?.sqr()?.reshape((b, ()))?.mean(D::Minus1)?)
}

/// `10·log10(max² / MSE)` over the whole tensor; `+∞` for identical inputs.
pub fn psnr(x: &Tensor, y: &Tensor, max_val: f64) -> Result<f64> {
    if x.dims() != y.dims() {
        return Err(Error::shape(x.dims(), y.dims()));
    }
    if !(max_val > 0.0) {
        return Err(Error::Config(format!("max_val must be > 0, got {max_val}")));
    }
    let d = (x.to_dtype(DType::F64)? - y.to_dtype(DType::F64)?)?;
    let mse = d.sqr()?.mean_all()?.to_scalar::<f64>()?;
    Ok(psnr_from_mse(mse, max_val))
}

pub fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

/// Feature-space image distance. Implementations must be differentiable
/// in candle so they can serve inside training losses.
pub trait PerceptualBackend: Send + Sync {
    fn id(&self) -> String;

    /// Per-sample distance between `[0, 1]` images, shape `(B,)`.
    fn distance(&self, x: &Tensor, y: &Tensor) -> Result<Tensor>;
}

/// Multi-scale random convolutional features with channel-normalized
/// squared differences and unit layer weights. Weights are fixed by seed.
#[derive(Debug, Clone)]
pub struct RandomFeatureBackend {
    seed: u64,
    layers: Vec<(Tensor, Tensor)>,
    layer_weights: Vec<f64>,
}

const FEATURE_WIDTHS: [usize; 3] = [16, 32, 32];
const NORM_EPS: f64 = 1e-10;

impl RandomFeatureBackend {
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        let mut rng = rng_from_seed(seed);
        let mut layers = Vec::new();
        let mut c_in = channels;
        for &c_out in &FEATURE_WIDTHS {
            let fan_in = (c_in * 9) as f64;
            let w: Vec<f64> = normal_vec(&mut rng, c_out * c_in * 9)
                .into_iter()
                .map(|v| v * (2.0 / fan_in).sqrt())
                .collect();
            let b: Vec<f64> = normal_vec(&mut rng, c_out).into_iter().map(|v| 0.1 * v).collect();
            layers.push((
                Tensor::from_vec(w, (c_out, c_in, 3, 3), &Device::Cpu)?,
                Tensor::from_vec(b, (1, c_out, 1, 1), &Device::Cpu)?,
            ));
            c_in = c_out;
        }
        Ok(Self {
            seed,
            layer_weights: vec![1.0; layers.len()],
            layers,
        })
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let dtype = x.dtype();
        let mut h = x.affine(2.0, -1.0)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, (w, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                let (_, _, hh, ww) = h.dims4()?;
                if hh % 2 != 0 || ww % 2 != 0 || hh < 2 || ww < 2 {
                    break;
                }
                h = mean_pool(&h, 2)?;
            }
            h = h
                .conv2d(&w.to_dtype(dtype)?, 1, 1, 1, 1)?
                .broadcast_add(&b.to_dtype(dtype)?)?
                .relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

fn unit_normalize(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(1)? + NORM_EPS)?.sqrt()?;
    Ok(f.broadcast_div(&norm)?)
}

impl PerceptualBackend for RandomFeatureBackend {
    fn id(&self) -> String {
        format!("random-features-v1/seed={}", self.seed)
    }

    fn distance(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        if x.dims() != y.dims() {
            return Err(Error::shape(x.dims(), y.dims()));
        }
        let b = x.dim(0)?;
        let fx = self.features(x)?;
        let fy = self.features(y)?;
        let mut total: Option<Tensor> = None;
        for ((a, c), w) in fx.iter().zip(&fy).zip(&self.layer_weights) {
            let diff = (unit_normalize(a)? - unit_normalize(c)?)?.sqr()?.sum(1)?;
            let per_sample = diff.reshape((b, ()))?.mean(D::Minus1)?.affine(*w, 0.0)?;
            total = Some(match total {
                Some(t) => (t + per_sample)?,
                None => per_sample,
            });
        }
        total.ok_or_else(|| Error::Config("image too small for any feature layer".into()))
    }
}

/// Mean perceptual distance over a batch as a plain number.
pub fn perceptual_distance(backend: &dyn PerceptualBackend, x: &Tensor, y: &Tensor) -> Result<f64> {
    let d = to_f64_vec(&backend.distance(x, y)?)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

pub(crate) fn serialize_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

pub(crate) fn deserialize_db<'de, De: serde::Deserializer<'de>>(d: De) -> std::result::Result<f64, De::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad dB value {t}"))),
    }
}

/// Quality scores for one evaluated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: String,
    pub image: String,
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub snr_db: f64,
    pub sigma_sq: f64,
    pub bcr: f64,
    pub seed: u64,
    /// `+∞` (written `inf`) when the reconstruction is exact.
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub psnr_db: f64,
    pub perceptual: f64,
}
