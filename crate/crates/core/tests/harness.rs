use std::path::Path;

use sing_core::checkpoint::read_header;
use sing_core::harness::dataset::{ingest, write_synthetic_dataset, SplitIndex};
use sing_core::harness::{train_stage, ExperimentConfig, Stage};
use sing_core::Error;

fn tiny_config(root: &Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset_dir: root.join("images"),
        output_dir: root.join("run"),
        image_size: 16,
        bcr: 0.05,
        scale: 2,
        seed: 17,
        t_total: 50,
        t_effective: 3,
        jscc_steps: 4,
        jscc_batch_size: 4,
        jscc_filters: 8,
        jscc_depth: 2,
        ddpm_steps: 4,
        ddpm_batch_size: 4,
        ddpm_width: 8,
        ddpm_time_dim: 8,
        inn_steps: 4,
        inn_batch_size: 4,
        inn_hidden: 8,
        inn_pairs: 1,
        inn_blocks: 1,
        ..Default::default()
    }
}

#[test]
fn hundred_images_split_eighty_ten_ten() {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(dir.path(), 100, 8, 0).unwrap();
    let a = ingest(dir.path(), [8, 1, 1], 42).unwrap();
    assert_eq!((a.train.len(), a.val.len(), a.test.len()), (80, 10, 10));
    assert_eq!(a, ingest(dir.path(), [8, 1, 1], 42).unwrap());
    assert_ne!(a, ingest(dir.path(), [8, 1, 1], 43).unwrap());

    let mut all: Vec<_> = a.train.iter().chain(&a.val).chain(&a.test).cloned().collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 100);

    let splits = dir.path().join("splits");
    a.write(&splits).unwrap();
    assert_eq!(SplitIndex::read(&splits).unwrap(), a);
}

#[test]
fn training_logs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    write_synthetic_dataset(&cfg.dataset_dir, 12, 16, 1).unwrap();
    let run = |sub: &str| {
        let cfg = ExperimentConfig {
            output_dir: dir.path().join(sub),
            ..cfg.clone()
        };
        [Stage::Jscc, Stage::Ddpm, Stage::Inn].map(|s| std::fs::read(train_stage(&cfg, s).unwrap().loss_log).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    for (x, y) in a.iter().zip(&b) {
        assert!(!x.is_empty());
        assert_eq!(x, y);
    }
    assert!(String::from_utf8_lossy(&a[0]).starts_with("step,loss\n"));
}

#[test]
fn checkpoints_describe_themselves() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    write_synthetic_dataset(&cfg.dataset_dir, 12, 16, 2).unwrap();
    let out = train_stage(&cfg, Stage::Ddpm).unwrap();
    let (header, _) = read_header(&out.checkpoint, "ddpm").unwrap();
    assert_eq!(header.config_hash.len(), 64);
    assert!(read_header(&out.checkpoint, "jscc").is_err());
}

#[test]
fn inn_training_needs_the_codec() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    write_synthetic_dataset(&cfg.dataset_dir, 12, 16, 3).unwrap();
    match train_stage(&cfg, Stage::Inn) {
        Err(Error::Dependency { stage, needed, .. }) => {
            assert_eq!(stage, "inn");
            assert!(needed.contains("jscc"));
        }
        other => panic!("expected a dependency error, got {other:?}"),
    }
}

#[test]
fn unknown_keys_are_all_listed() {
    let text = "version = 1\nsnr_gird = [1.0]\nbrc = 0.1\nseed = 3\n";
    let err = ExperimentConfig::from_toml_str(text).unwrap_err().to_string();
    assert!(err.contains("snr_gird") && err.contains("brc"), "{err}");
}
