use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use sing_core::harness::dataset::{ingest, write_synthetic_dataset};
use sing_core::harness::{evaluate, train_stage, ExperimentConfig, Stage};

/// Train and evaluate diffusion-restored JSCC image transmission.
#[derive(Parser)]
#[command(name = "sing", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the dataset folder and write split index files.
    Ingest(Common),
    /// Train one component: jscc, ddpm or inn.
    Train {
        component: Stage,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep the SNR grid and write metrics, summary, manifest and plots.
    Evaluate(Common),
    /// Print a config populated with defaults.
    DefaultConfig,
    /// Write a folder of synthetic images for smoke runs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.output {
        cfg.output_dir = absolute(out)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    Ok(if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir()?.join(p)
    })
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Ingest(common) => {
            let cfg = load(&common)?;
            let index = ingest(&cfg.dataset_dir, cfg.split, cfg.seed)?;
            index.write(&cfg.splits_dir())?;
            println!(
                "train {} / val {} / test {} -> {}",
                index.train.len(),
                index.val.len(),
                index.test.len(),
                cfg.splits_dir().display()
            );
        }
        Command::Train { component, common } => {
            let cfg = load(&common)?;
            let out = train_stage(&cfg, component)?;
            println!(
                "{}: {} steps, final loss {}, checkpoint {}, log {}",
                component.name(),
                out.losses.len(),
                out.losses.last().map_or("n/a".to_string(), |l| format!("{l:.6}")),
                out.checkpoint.display(),
                out.loss_log.display()
            );
        }
        Command::Evaluate(common) => {
            let cfg = load(&common)?;
            let (manifest, outputs) = evaluate(&cfg)?;
            println!("baseline (dataset mean) PSNR {:.3} dB", manifest.baseline_psnr_db);
            for a in &manifest.aggregates {
                println!(
                    "{:>10} snr {:>5.1} dB  psnr {:>7.3} dB  perceptual {:.5}",
                    a.method, a.snr_db, a.mean_psnr_db, a.mean_perceptual
                );
            }
            for w in &manifest.warnings {
                println!("warning: {w}");
            }
            println!("manifest {}", outputs.manifest.display());
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml_string()?),
        Command::Synth { out, count, size, seed } => {
            write_synthetic_dataset(&out, count, size, seed)?;
            println!("wrote {count} images to {}", out.display());
        }
    }
    Ok(())
}
