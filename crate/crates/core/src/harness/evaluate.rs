//! `evaluate` subcommand: transmit each test image at every grid SNR,
//! restore with each configured method, score, and write the run
//! manifest, CSVs and plots.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method, Split, Stage};
use super::dataset::save_png;
use super::report::{line_plot, Series};
use super::train::{ensure_splits, load_split, DTYPE};
use crate::channel::snr_to_sigma_sq;
use crate::cond_inn::{CondInn, InvertibleSplit};
use crate::deepjscc::JsccModel;
use crate::degradation::measurement_from_decoder;
use crate::diffusion::DenoiserModel;
use crate::metrics::{deserialize_db, perceptual_distance, psnr, serialize_db, MetricsRecord, RandomFeatureBackend};
use crate::nn::max_abs_diff;
use crate::rng::{derive_seed, rng_from_seed};
use crate::sing_inn::{restore_inn, zeta_schedule, SingInnConfig};
use crate::sing_zero::{restore, SingZeroConfig};
use crate::{Error, Result};

/// Bound on `‖A x̂ − y‖∞` for SING-Zero outputs.
pub const CONSISTENCY_TOL: f64 = 1e-4;
/// Bound on `‖coarse(INN(x̃₀)) − y‖∞` at every SING-INN step.
pub const LIFTING_TOL: f64 = 1e-4;

/// Mean scores of one (method, SNR) cell group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub snr_db: f64,
    pub sigma_sq: f64,
    pub images: usize,
    #[serde(serialize_with = "serialize_db", deserialize_with = "deserialize_db")]
    pub mean_psnr_db: f64,
    pub mean_perceptual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub software_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub perceptual_backend: String,
    /// PSNR of the training-set mean image against each evaluated image, averaged.
    pub baseline_psnr_db: f64,
    pub records: Vec<MetricsRecord>,
    pub aggregates: Vec<Aggregate>,
    /// Largest `‖A x̂ − y‖∞` over SING-Zero outputs.
    pub max_consistency_residual: Option<f64>,
    /// Largest per-step lifting residual over SING-INN runs.
    pub max_lifting_residual: Option<f64>,
    pub warnings: Vec<String>,
    pub wall_clock_s: f64,
}

/// Output file locations of an evaluation run.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub manifest: PathBuf,
    pub metrics_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub psnr_plot: PathBuf,
    pub perceptual_plot: PathBuf,
}

impl RunOutputs {
    pub fn under(dir: &Path) -> Self {
        let dir = dir.join("eval");
        Self {
            manifest: dir.join("manifest.json"),
            metrics_csv: dir.join("metrics.csv"),
            summary_csv: dir.join("summary.csv"),
            psnr_plot: dir.join("psnr_vs_snr.svg"),
            perceptual_plot: dir.join("perceptual_vs_snr.svg"),
        }
    }
}

fn required_stages(methods: &[Method]) -> Vec<Stage> {
    let mut stages = vec![Stage::Jscc];
    if methods.iter().any(|m| *m != Method::Deepjscc) {
        stages.push(Stage::Ddpm);
    }
    if methods.contains(&Method::SingInn) {
        stages.push(Stage::Inn);
    }
    stages
}

/// Fails with a dependency error naming the first missing checkpoint.
pub fn check_dependencies(cfg: &ExperimentConfig) -> Result<()> {
    for stage in required_stages(&cfg.methods) {
        let path = cfg.checkpoint_path(stage);
        if !path.is_file() {
            return Err(Error::Dependency {
                stage: "evaluate".into(),
                needed: format!("{} checkpoint (run `train {}` first)", stage.name(), stage.name()),
                path,
            });
        }
    }
    Ok(())
}

struct Models {
    jscc: JsccModel,
    ddpm: Option<DenoiserModel>,
    inn: Option<CondInn>,
}

impl Models {
    fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let (jscc, _) = JsccModel::load(&cfg.checkpoint_path(Stage::Jscc), DTYPE)?;
        let expected = cfg.jscc_config();
        if jscc.config().height != expected.height || jscc.config().channels != expected.channels || jscc.config().bcr != expected.bcr {
            return Err(Error::Config(format!(
                "jscc checkpoint was trained for {}x{}x{} at bcr {}, config asks for {}x{}x{} at bcr {}",
                jscc.config().channels,
                jscc.config().height,
                jscc.config().width,
                jscc.config().bcr,
                expected.channels,
                expected.height,
                expected.width,
                expected.bcr
            )));
        }
        let stages = required_stages(&cfg.methods);
        let ddpm = if stages.contains(&Stage::Ddpm) {
            let (m, _) = DenoiserModel::load(&cfg.checkpoint_path(Stage::Ddpm), DTYPE)?;
            if cfg.t_effective > m.schedule().len() {
                return Err(Error::Validation {
                    keys: vec!["t_effective".into()],
                    message: format!("exceeds the checkpoint's {} diffusion steps", m.schedule().len()),
                });
            }
            Some(m)
        } else {
            None
        };
        let inn = if stages.contains(&Stage::Inn) {
            let (m, _) = CondInn::load(&cfg.checkpoint_path(Stage::Inn), DTYPE)?;
            let want = cfg.inn_config()?;
            if m.config().scale != want.scale || m.config().coarse_channels != want.coarse_channels {
                return Err(Error::Config("inn checkpoint does not match the configured operator".into()));
            }
            Some(m)
        } else {
            None
        };
        Ok(Self { jscc, ddpm, inn })
    }
}

struct CellOutput {
    records: Vec<MetricsRecord>,
    consistency: Option<f64>,
    lifting: Option<f64>,
    warnings: Vec<String>,
    samples: Vec<(String, Tensor)>,
}

struct Cell<'a> {
    snr_index: usize,
    snr_db: f64,
    image_index: usize,
    name: &'a str,
    x: Tensor,
}

fn run_cell(
    cfg: &ExperimentConfig,
    models: &Models,
    backend: &RandomFeatureBackend,
    cell: &Cell<'_>,
    keep_samples: bool,
) -> Result<CellOutput> {
    let op = cfg.operator();
    let seed = derive_seed(cfg.seed, &[cell.snr_index as u64, cell.image_index as u64]);
    let sigma_sq = snr_to_sigma_sq(cell.snr_db, models.jscc.config().avg_power);
    let x_dec = models
        .jscc
        .transmit(&cell.x, cell.snr_db, &mut rng_from_seed(derive_seed(seed, &[0])))?
        .detach();
    let y = measurement_from_decoder(&x_dec, &op)?;
    let mut out = CellOutput {
        records: Vec::new(),
        consistency: None,
        lifting: None,
        warnings: Vec::new(),
        samples: Vec::new(),
    };
    let sampler_seed = derive_seed(seed, &[1]);
    for &method in &cfg.methods {
        let restored = match method {
            Method::Deepjscc => x_dec.clone(),
            Method::SingZero => {
                let ddpm = models.ddpm.as_ref().expect("denoiser loaded");
                let zc = SingZeroConfig {
                    operator: op,
                    channels: cfg.channels,
                    t_effective: cfg.t_effective,
                    seed: sampler_seed,
                    record_diagnostics: false,
                };
                let r = restore(&y, ddpm, ddpm.schedule(), &zc)?;
                let residual = max_abs_diff(&op.apply(&r.image)?, &y)?;
                if !(residual <= CONSISTENCY_TOL) {
                    return Err(Error::Invariant {
                        method: method.name().into(),
                        image: cell.name.into(),
                        invariant: "A(x̂) = y".into(),
                        residual,
                    });
                }
                out.consistency = Some(residual);
                r.clamped()?.to_dtype(DTYPE)?
            }
            Method::SingInn => {
                let ddpm = models.ddpm.as_ref().expect("denoiser loaded");
                let inn = models.inn.as_ref().expect("inn loaded");
                let ic = SingInnConfig {
                    operator: op,
                    channels: cfg.channels,
                    snr_db: cell.snr_db,
                    zeta: cfg.zeta.unwrap_or_else(|| zeta_schedule(cell.snr_db)),
                    seed: sampler_seed,
                    t_effective: cfg.t_effective,
                    guidance: cfg.guidance,
                    record_diagnostics: true,
                };
                let r = restore_inn(&y, ddpm, inn as &dyn InvertibleSplit, ddpm.schedule(), &ic)?;
                let lifting = r.steps.iter().filter_map(|s| s.lifting).fold(0.0, f64::max);
                if !(lifting <= LIFTING_TOL) {
                    return Err(Error::Invariant {
                        method: method.name().into(),
                        image: cell.name.into(),
                        invariant: "coarse(INN(x̃₀)) = y".into(),
                        residual: lifting,
                    });
                }
                out.lifting = Some(lifting);
                out.warnings.extend(r.warnings.iter().cloned());
                r.clamped()?.to_dtype(DTYPE)?
            }
        };
        out.records.push(MetricsRecord {
            method: method.name().into(),
            image: cell.name.into(),
            snr_db: cell.snr_db,
            sigma_sq,
            bcr: cfg.bcr,
            seed,
            psnr_db: psnr(&restored, &cell.x, 1.0)?,
            perceptual: perceptual_distance(backend, &restored, &cell.x)?,
        });
        if keep_samples {
            out.samples.push((format!("{}_snr{}_{}.png", method.name(), cell.snr_db, cell.name), restored.squeeze(0)?));
        }
    }
    Ok(out)
}

fn aggregate(cfg: &ExperimentConfig, records: &[MetricsRecord]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    for &method in &cfg.methods {
        for &snr in &cfg.snr_grid {
            let group: Vec<&MetricsRecord> = records
                .iter()
                .filter(|r| r.method == method.name() && r.snr_db == snr)
                .collect();
            let n = group.len().max(1) as f64;
            out.push(Aggregate {
                method: method.name().into(),
                snr_db: snr,
                sigma_sq: group.first().map_or(f64::NAN, |r| r.sigma_sq),
                images: group.len(),
                mean_psnr_db: group.iter().map(|r| r.psnr_db).sum::<f64>() / n,
                mean_perceptual: group.iter().map(|r| r.perceptual).sum::<f64>() / n,
            });
        }
    }
    out
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    for row in rows {
        w.serialize(row).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

fn plot_series(cfg: &ExperimentConfig, aggregates: &[Aggregate], pick: impl Fn(&Aggregate) -> f64) -> Vec<Series> {
    cfg.methods
        .iter()
        .map(|m| Series {
            name: m.name().into(),
            points: aggregates
                .iter()
                .filter(|a| a.method == m.name())
                .map(|a| (a.snr_db, pick(a)))
                .collect(),
        })
        .collect()
}

/// Runs the full sweep and writes `eval/` under the output directory.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<(RunManifest, RunOutputs)> {
    let start = Instant::now();
    cfg.validate()?;
    check_dependencies(cfg)?;
    let models = Models::load(cfg)?;
    let index = ensure_splits(cfg)?;
    let mut names: Vec<String> = index.get(cfg.eval_split).to_vec();
    if let Some(max) = cfg.eval_max_images {
        names.truncate(max);
    }
    if names.is_empty() {
        return Err(Error::Config(format!("{} split is empty", cfg.eval_split.name())));
    }
    let images = super::dataset::load_images(&cfg.dataset_dir, &names, cfg.image_size, cfg.channels)?;
    let mean_image = load_split(cfg, &index, Split::Train)?.mean_keepdim(0)?;
    let mut baseline = 0.0;
    for j in 0..names.len() {
        baseline += psnr(&mean_image, &images.narrow(0, j, 1)?, 1.0)?;
    }
    let baseline_psnr_db = baseline / names.len() as f64;
    let backend = RandomFeatureBackend::new(cfg.channels, cfg.perceptual_seed)?;

    let mut cells = Vec::new();
    for (si, &snr) in cfg.snr_grid.iter().enumerate() {
        for (j, name) in names.iter().enumerate() {
            cells.push(Cell {
                snr_index: si,
                snr_db: snr,
                image_index: j,
                name,
                x: images.narrow(0, j, 1)?.to_dtype(DTYPE)?,
            });
        }
    }
    log::info!(
        "evaluating {} cells ({} SNRs x {} images) for {:?}",
        cells.len(),
        cfg.snr_grid.len(),
        names.len(),
        cfg.methods
    );
    let results: Vec<CellOutput> = cells
        .par_iter()
        .map(|cell| run_cell(cfg, &models, &backend, cell, cell.image_index == 0))
        .collect::<Result<_>>()?;

    let outputs = RunOutputs::under(&cfg.output_dir);
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut consistency: Option<f64> = None;
    let mut lifting: Option<f64> = None;
    for r in &results {
        records.extend(r.records.iter().cloned());
        for w in &r.warnings {
            if !warnings.contains(w) {
                warnings.push(w.clone());
            }
        }
        consistency = r.consistency.map(|c| consistency.map_or(c, |m| m.max(c))).or(consistency);
        lifting = r.lifting.map(|c| lifting.map_or(c, |m| m.max(c))).or(lifting);
        for (file, img) in &r.samples {
            save_png(img, &outputs.manifest.with_file_name("samples").join(file))?;
        }
    }
    let aggregates = aggregate(cfg, &records);
    write_csv(&outputs.metrics_csv, &records)?;
    write_csv(&outputs.summary_csv, &aggregates)?;
    line_plot(
        &outputs.psnr_plot,
        "PSNR vs channel SNR",
        "PSNR (dB)",
        &plot_series(cfg, &aggregates, |a| a.mean_psnr_db),
    )?;
    line_plot(
        &outputs.perceptual_plot,
        "Perceptual distance vs channel SNR",
        "perceptual distance",
        &plot_series(cfg, &aggregates, |a| a.mean_perceptual),
    )?;
    let manifest = RunManifest {
        software_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        perceptual_backend: crate::metrics::PerceptualBackend::id(&backend),
        baseline_psnr_db,
        records,
        aggregates,
        max_consistency_residual: consistency,
        max_lifting_residual: lifting,
        warnings,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    std::fs::write(&outputs.manifest, serde_json::to_string_pretty(&manifest)?)?;
    log::info!("wrote {}", outputs.manifest.display());
    Ok((manifest, outputs))
}
