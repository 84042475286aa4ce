//! Linear degradation operators `A` with right pseudo-inverses `A†`
//! (`A A† = I`), applied matrix-free to NCHW tensors.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LinearDegradation {
    Identity,
    /// Block mean over `scale × scale` windows; `A†` replicates each pixel.
    MeanPool { scale: usize },
    /// Channel mean; `A†` copies the gray value into every channel.
    Decolorize,
}

impl LinearDegradation {
    pub fn mean_pool(scale: usize) -> Result<Self> {
        if scale == 0 {
            return Err(Error::Config("mean-pool scale must be >= 1".into()));
        }
        Ok(Self::MeanPool { scale })
    }

    /// Spatial reduction factor.
    pub fn scale(&self) -> usize {
        match self {
            Self::MeanPool { scale } => *scale,
            _ => 1,
        }
    }

    /// Shape of `A x` for an input of shape `(C, H, W)`.
    pub fn measurement_shape(&self, chw: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (c, h, w) = chw;
        match self {
            Self::Identity => Ok(chw),
            Self::MeanPool { scale } => {
                let s = *scale;
                if s == 0 || h % s != 0 || w % s != 0 {
                    return Err(Error::Config(format!(
                        "image {h}x{w} is not divisible by mean-pool scale {s}"
                    )));
                }
                Ok((c, h / s, w / s))
            }
            Self::Decolorize => Ok((1, h, w)),
        }
    }

    /// `A x`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Self::Identity => Ok(x.clone()),
            Self::MeanPool { scale } => mean_pool(x, *scale),
            Self::Decolorize => Ok(x.mean_keepdim(1)?),
        }
    }

    /// `A† y`; `full_channels` is the channel count of the signal space.
    pub fn pinv_apply(&self, y: &Tensor, full_channels: usize) -> Result<Tensor> {
        match self {
            Self::Identity => Ok(y.clone()),
            Self::MeanPool { scale } => pinv_replicate(y, *scale),
            Self::Decolorize => {
                let (b, c, h, w) = y.dims4()?;
                if c != 1 {
                    return Err(Error::shape("1 gray channel", c));
                }
                Ok(y.broadcast_as((b, full_channels, h, w))?.contiguous()?)
            }
        }
    }

    /// `A†A x`.
    pub fn project_range(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        self.pinv_apply(&self.apply(x)?, c)
    }

    /// `x − A†(A x − y)`: replaces the range component of `x` with `A† y`.
    pub fn rectify(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let residual = (self.apply(x)? - y)?;
        Ok((x - self.pinv_apply(&residual, c)?)?)
    }

    /// Dense matrix of `A` (row-major, rows × cols) for a single `(C, H, W)`
    /// image, built column by column from basis vectors. Oracle scale only.
    pub fn dense_forward(&self, chw: (usize, usize, usize)) -> Result<DenseMatrix> {
        let (c, h, w) = chw;
        let (mc, mh, mw) = self.measurement_shape(chw)?;
        let (rows, cols) = (mc * mh * mw, c * h * w);
        let mut data = vec![0.0; rows * cols];
        for j in 0..cols {
            let mut e = vec![0.0f64; cols];
            e[j] = 1.0;
            let basis = Tensor::from_vec(e, (1, c, h, w), &candle_core::Device::Cpu)?;
            let col = crate::nn::to_f64_vec(&self.apply(&basis)?)?;
            for (i, v) in col.into_iter().enumerate() {
                data[i * cols + j] = v;
            }
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Dense matrix of `A†` for measurements of the given input shape.
    pub fn dense_pinv(&self, chw: (usize, usize, usize)) -> Result<DenseMatrix> {
        let (c, h, w) = chw;
        let (mc, mh, mw) = self.measurement_shape(chw)?;
        let (rows, cols) = (c * h * w, mc * mh * mw);
        let mut data = vec![0.0; rows * cols];
        for j in 0..cols {
            let mut e = vec![0.0f64; cols];
            e[j] = 1.0;
            let basis = Tensor::from_vec(e, (1, mc, mh, mw), &candle_core::Device::Cpu)?;
            let col = crate::nn::to_f64_vec(&self.pinv_apply(&basis, c)?)?;
            for (i, v) in col.into_iter().enumerate() {
                data[i * cols + j] = v;
            }
        }
        Ok(DenseMatrix { rows, cols, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub data: Vec<f64>,
}

/// Mean of each `s × s` block, per channel. `x`: (B, C, H, W).
pub fn mean_pool(x: &Tensor, s: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible by mean-pool scale {s}"
        )));
    }
    if s == 1 {
        return Ok(x.clone());
    }
    let blocks = x.reshape((b, c, h / s, s, w / s, s))?;
    let summed = blocks.sum(D::Minus1)?.sum(3)?;
    Ok(summed.affine(1.0 / (s * s) as f64, 0.0)?)
}

/// Replicates every pixel into an `s × s` block; right inverse of [`mean_pool`].
pub fn pinv_replicate(y: &Tensor, s: usize) -> Result<Tensor> {
    if s == 0 {
        return Err(Error::Config("replication scale must be >= 1".into()));
    }
    if s == 1 {
        return Ok(y.clone());
    }
    let (b, c, h, w) = y.dims4()?;
    Ok(y
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, s, w, s))?
        .contiguous()?
        .reshape((b, c, h * s, w * s))?)
}

/// `(A†A x, x − A†A x)`.
pub fn range_null_project(x: &Tensor, op: &LinearDegradation) -> Result<(Tensor, Tensor)> {
    let range = op.project_range(x)?;
    let null = (x - &range)?;
    Ok((range, null))
}

/// The measurement `y = A(x_dec)` that anchors both samplers.
pub fn measurement_from_decoder(x_dec: &Tensor, op: &LinearDegradation) -> Result<Tensor> {
    op.apply(x_dec)
}
