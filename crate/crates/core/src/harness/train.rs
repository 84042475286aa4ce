//! `train` subcommand: fits one pipeline component and writes its
//! checkpoint plus a per-step loss log.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::Rng;

use super::config::{ExperimentConfig, Split, Stage};
use super::dataset::{ingest, load_images, SplitIndex};
use crate::cond_inn::{CondInn, InnTrainer};
use crate::deepjscc::{train, BatchSampler, JsccModel, JsccTrainSettings, gather};
use crate::degradation::measurement_from_decoder;
use crate::diffusion::{DdpmTrainer, DenoiserModel, TrainingLog};
use crate::metrics::RandomFeatureBackend;
use crate::rng::{derive_seed, rng_from_seed};
use crate::{Error, Result};

/// Working precision for training and evaluation.
pub const DTYPE: DType = DType::F32;

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stage: Stage,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub losses: Vec<f64>,
}

/// Reads the split index under the output directory, ingesting the dataset
/// first if it is missing.
pub fn ensure_splits(cfg: &ExperimentConfig) -> Result<SplitIndex> {
    let dir = cfg.splits_dir();
    if SplitIndex::exists(&dir) {
        return SplitIndex::read(&dir);
    }
    let index = ingest(&cfg.dataset_dir, cfg.split, cfg.seed)?;
    index.write(&dir)?;
    log::info!(
        "ingested {}: {} train / {} val / {} test",
        cfg.dataset_dir.display(),
        index.train.len(),
        index.val.len(),
        index.test.len()
    );
    Ok(index)
}

pub fn load_split(cfg: &ExperimentConfig, index: &SplitIndex, split: Split) -> Result<Tensor> {
    let names = index.get(split);
    if names.is_empty() {
        return Err(Error::Config(format!("{} split is empty", split.name())));
    }
    load_images(&cfg.dataset_dir, names, cfg.image_size, cfg.channels)
}

/// Fails with a dependency error if `stage` needs a checkpoint that is
/// not on disk.
pub fn check_prerequisites(cfg: &ExperimentConfig, stage: Stage) -> Result<()> {
    if stage == Stage::Inn {
        let path = cfg.checkpoint_path(Stage::Jscc);
        if !path.is_file() {
            return Err(Error::Dependency {
                stage: "inn".into(),
                needed: "jscc checkpoint (run `train jscc` first)".into(),
                path,
            });
        }
    }
    Ok(())
}

pub fn train_stage(cfg: &ExperimentConfig, stage: Stage) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_prerequisites(cfg, stage)?;
    let index = ensure_splits(cfg)?;
    let data = load_split(cfg, &index, Split::Train)?;
    let checkpoint = cfg.checkpoint_path(stage);
    log::info!("training {} on {} images", stage.name(), data.dim(0)?);
    let losses = match stage {
        Stage::Jscc => {
            let settings = JsccTrainSettings {
                steps: cfg.jscc_steps,
                batch_size: cfg.jscc_batch_size,
                lr: cfg.jscc_lr,
                snr_range: (cfg.train_snr_min, cfg.train_snr_max),
                seed: derive_seed(cfg.seed, &[1]),
            };
            let perceptual = RandomFeatureBackend::new(cfg.channels, cfg.perceptual_seed)?;
            let (model, log) = train(cfg.jscc_config(), &data, &settings, &perceptual, DTYPE)?;
            model.save(&checkpoint, &log)?;
            log.losses
        }
        Stage::Ddpm => {
            let log = train_ddpm(cfg, &data, &checkpoint)?;
            log.losses
        }
        Stage::Inn => {
            let log = train_inn_stage(cfg, &data, &checkpoint)?;
            log.losses
        }
    };
    let loss_log = cfg.output_dir.join("logs").join(format!("{}_loss.csv", stage.name()));
    write_loss_log(&loss_log, &losses)?;
    log::info!(
        "{}: {} steps, final loss {:?}, checkpoint {}",
        stage.name(),
        losses.len(),
        losses.last(),
        checkpoint.display()
    );
    Ok(TrainOutcome {
        stage,
        checkpoint,
        loss_log,
        losses,
    })
}

fn train_ddpm(cfg: &ExperimentConfig, data: &Tensor, checkpoint: &Path) -> Result<TrainingLog> {
    let seed = derive_seed(cfg.seed, &[2]);
    let model = DenoiserModel::new(cfg.denoiser_config(), DTYPE, derive_seed(seed, &[0]))?;
    let mut trainer = DdpmTrainer::new(&model, cfg.ddpm_lr, derive_seed(seed, &[1]))?;
    let mut rng = rng_from_seed(derive_seed(seed, &[2]));
    let mut batches = BatchSampler::new(data.dim(0)?);
    let mut log = TrainingLog {
        seed,
        ..Default::default()
    };
    for _ in 0..cfg.ddpm_steps {
        let x = gather(data, &batches.next(&mut rng, cfg.ddpm_batch_size))?;
        log.push(trainer.train_step(&model, &x)?);
    }
    model.save(checkpoint, &log)?;
    Ok(log)
}

/// Pairs each ground-truth batch with `y = A(decoder output)` produced by a
/// fresh channel realisation at one uniformly drawn SNR per step.
fn train_inn_stage(cfg: &ExperimentConfig, data: &Tensor, checkpoint: &Path) -> Result<TrainingLog> {
    let (jscc, _) = JsccModel::load(&cfg.checkpoint_path(Stage::Jscc), DTYPE)?;
    let seed = derive_seed(cfg.seed, &[3]);
    let inn = CondInn::new(cfg.inn_config()?, DTYPE, derive_seed(seed, &[0]))?;
    let mut trainer = InnTrainer::new(&inn, cfg.inn_lr)?;
    let mut rng = rng_from_seed(derive_seed(seed, &[1]));
    let mut batches = BatchSampler::new(data.dim(0)?);
    let op = cfg.operator();
    let (lo, hi) = (cfg.train_snr_min, cfg.train_snr_max);
    let mut log = TrainingLog {
        seed,
        ..Default::default()
    };
    for _ in 0..cfg.inn_steps {
        let x = gather(data, &batches.next(&mut rng, cfg.inn_batch_size))?;
        let snr = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        let x_dec = jscc.transmit(&x, snr, &mut rng)?.detach();
        let y = measurement_from_decoder(&x_dec, &op)?;
        let labels = vec![snr; x.dim(0)?];
        log.push(trainer.step(&inn, &x, &y, &labels)?);
    }
    inn.save(checkpoint, &log)?;
    Ok(log)
}

pub fn write_loss_log(path: &Path, losses: &[f64]) -> Result<()> {
    let mut text = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(text, "{},{}", i + 1, l);
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
