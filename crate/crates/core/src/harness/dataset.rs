//! Image folder ingestion: deterministic shuffled splits written as index
//! files, and loading of images resized and center-cropped to a square.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::DynamicImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::Split;
use crate::rng::rng_from_seed;
use crate::{Error, Result};

/// File names (relative to the dataset directory) of each split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndex {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitIndex {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for split in [Split::Train, Split::Val, Split::Test] {
            let mut text = self.get(split).join("\n");
            text.push('\n');
            std::fs::write(dir.join(format!("{}.txt", split.name())), text)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let read = |split: Split| -> Result<Vec<String>> {
            let text = std::fs::read_to_string(dir.join(format!("{}.txt", split.name())))?;
            Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
        };
        Ok(Self {
            train: read(Split::Train)?,
            val: read(Split::Val)?,
            test: read(Split::Test)?,
        })
    }

    pub fn exists(dir: &Path) -> bool {
        [Split::Train, Split::Val, Split::Test]
            .iter()
            .all(|s| dir.join(format!("{}.txt", s.name())).is_file())
    }
}

/// Split sizes for `n` items; the test split takes the rounding remainder.
pub fn split_counts(n: usize, ratios: [u32; 3]) -> [usize; 3] {
    let total: u64 = ratios.iter().map(|&r| r as u64).sum();
    if total == 0 {
        return [n, 0, 0];
    }
    let train = (n as u64 * ratios[0] as u64 / total) as usize;
    let val = (n as u64 * ratios[1] as u64 / total) as usize;
    [train, val, n - train - val]
}

/// Resize the short side to `size` (Lanczos), then center-crop.
pub fn square_crop(img: &DynamicImage, size: usize) -> DynamicImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (nw, nh) = if w <= h {
        (size, (h * size).div_ceil(w))
    } else {
        ((w * size).div_ceil(h), size)
    };
    let resized = if (nw, nh) == (w, h) {
        img.clone()
    } else {
        img.resize_exact(nw as u32, nh as u32, FilterType::Lanczos3)
    };
    resized.crop_imm(((nw - size) / 2) as u32, ((nh - size) / 2) as u32, size as u32, size as u32)
}

fn listing(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Ingestion {
        reason: format!("cannot read dataset directory: {e}"),
        files: vec![dir.to_path_buf()],
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Checks that every file in `dir` decodes as an image and returns a
/// seeded shuffled split of their names.
pub fn ingest(dir: &Path, ratios: [u32; 3], seed: u64) -> Result<SplitIndex> {
    let files = listing(dir)?;
    if files.is_empty() {
        return Err(Error::Ingestion {
            reason: "dataset directory contains no files".into(),
            files: vec![dir.to_path_buf()],
        });
    }
    let bad: Vec<PathBuf> = files
        .iter()
        .filter(|p| image::ImageReader::open(p).and_then(|r| r.with_guessed_format()).map_err(image::ImageError::from).and_then(|r| r.decode()).is_err())
        .cloned()
        .collect();
    if !bad.is_empty() {
        return Err(Error::Ingestion {
            reason: format!("{} of {} files could not be decoded as images", bad.len(), files.len()),
            files: bad,
        });
    }
    let mut names: Vec<String> = files
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    names.shuffle(&mut rng_from_seed(seed));
    let [a, b, _] = split_counts(names.len(), ratios);
    let test = names.split_off(a + b);
    let val = names.split_off(a);
    Ok(SplitIndex { train: names, val, test })
}

/// Loads images as an `(N, C, size, size)` f32 tensor in `[0, 1]`.
pub fn load_images(dir: &Path, names: &[String], size: usize, channels: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(names.len() * channels * size * size);
    for name in names {
        let path = dir.join(name);
        let img = image::ImageReader::open(&path)?.with_guessed_format()?.decode().map_err(|e| Error::Ingestion {
            reason: e.to_string(),
            files: vec![path.clone()],
        })?;
        let img = square_crop(&img, size);
        match channels {
            1 => data.extend(img.to_luma8().pixels().map(|p| p.0[0] as f32 / 255.0)),
            _ => {
                let rgb = img.to_rgb8();
                for c in 0..3 {
                    data.extend(rgb.pixels().map(|p| p.0[c] as f32 / 255.0));
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (names.len(), channels, size, size), &Device::Cpu)?)
}

/// Writes an image tensor `(C, H, W)` in `[0, 1]` as PNG.
pub fn save_png(x: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = x.dims3()?;
    let v: Vec<f32> = x
        .clamp(0.0, 1.0)?
        .to_dtype(candle_core::DType::F32)?
        .flatten_all()?
        .to_vec1()?;
    let px = |i: usize| (v[i] * 255.0).round() as u8;
    let img: DynamicImage = if c == 1 {
        image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([px(y as usize * w + x as usize)])).into()
    } else {
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let o = y as usize * w + x as usize;
            image::Rgb([px(o), px(h * w + o), px(2 * h * w + o)])
        })
        .into()
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)?;
    Ok(())
}

/// Writes `count` PNGs of soft-edged colored ellipses over a linear
/// gradient. Deterministic in `seed`; useful for smoke runs.
pub fn write_synthetic_dataset(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    use rand::Rng;
    std::fs::create_dir_all(dir)?;
    let mut rng = rng_from_seed(seed);
    let mut paths = Vec::with_capacity(count);
    let s = size as f64;
    for i in 0..count {
        let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let blobs: Vec<([f64; 3], f64, f64, f64, f64)> = (0..rng.random_range(1..=3))
            .map(|_| {
                (
                    std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                    rng.random_range(0.2..0.8) * s,
                    rng.random_range(0.2..0.8) * s,
                    rng.random_range(0.1..0.3) * s,
                    rng.random_range(0.1..0.3) * s,
                )
            })
            .collect();
        let img = image::RgbImage::from_fn(size as u32, size as u32, |x, y| {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((fx / s - 0.5) * angle.cos() + (fy / s - 0.5) * angle.sin()) + 0.5).clamp(0.0, 1.0);
            let mut px: [f64; 3] = std::array::from_fn(|c| c0[c] * (1.0 - t) + c1[c] * t);
            for (color, cx, cy, rx, ry) in &blobs {
                let r = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
                let w = 1.0 / (1.0 + (8.0 * (r - 1.0)).exp());
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - w) + color[c] * w;
                }
            }
            image::Rgb(px.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        });
        let path = dir.join(format!("synth_{i:05}.png"));
        img.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
