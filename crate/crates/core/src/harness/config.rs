//! Flat TOML experiment configuration.
//!
//! Every key is optional; omitted keys take the documented defaults.
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::cond_inn::CondInnConfig;
use crate::degradation::LinearDegradation;
use crate::diffusion::{DenoiserConfig, Parametrization, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TIMESTEPS};
use crate::deepjscc::JsccConfig;
use crate::sing_inn::GuidanceMode;
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Deepjscc,
    SingZero,
    SingInn,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Deepjscc => "deepjscc",
            Method::SingZero => "sing_zero",
            Method::SingInn => "sing_inn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Identity,
    MeanPool,
    Decolorize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Train : validation : test proportions.
    pub split: [u32; 3],
    pub image_size: usize,
    pub channels: usize,
    pub bcr: f64,
    pub snr_grid: Vec<f64>,
    pub methods: Vec<Method>,
    pub operator: OperatorKind,
    pub scale: usize,
    pub seed: u64,
    pub jscc_checkpoint: Option<PathBuf>,
    pub ddpm_checkpoint: Option<PathBuf>,
    pub inn_checkpoint: Option<PathBuf>,
    pub t_total: usize,
    pub t_effective: usize,
    /// Fixed guidance step size; by default it follows the SNR.
    pub zeta: Option<f64>,
    pub guidance: GuidanceMode,
    pub lambda_perceptual: f64,
    pub perceptual_seed: u64,
    pub train_snr_min: f64,
    pub train_snr_max: f64,
    pub jscc_steps: usize,
    pub jscc_batch_size: usize,
    pub jscc_lr: f64,
    pub jscc_filters: usize,
    pub jscc_depth: usize,
    pub ddpm_steps: usize,
    pub ddpm_batch_size: usize,
    pub ddpm_lr: f64,
    pub ddpm_width: usize,
    pub ddpm_time_dim: usize,
    pub inn_steps: usize,
    pub inn_batch_size: usize,
    pub inn_lr: f64,
    pub inn_hidden: usize,
    pub inn_pairs: usize,
    pub inn_blocks: usize,
    pub eval_split: Split,
    pub eval_max_images: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            dataset_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            split: [8, 1, 1],
            image_size: 64,
            channels: 3,
            bcr: 0.0052,
            snr_grid: vec![-5.0, -3.0, -1.0, 1.0, 3.0, 5.0],
            methods: vec![Method::Deepjscc, Method::SingZero, Method::SingInn],
            operator: OperatorKind::MeanPool,
            scale: 4,
            seed: 0,
            jscc_checkpoint: None,
            ddpm_checkpoint: None,
            inn_checkpoint: None,
            t_total: DEFAULT_TIMESTEPS,
            t_effective: DEFAULT_TIMESTEPS,
            zeta: None,
            guidance: GuidanceMode::Full,
            lambda_perceptual: 1.0,
            perceptual_seed: 0,
            train_snr_min: -5.0,
            train_snr_max: 5.0,
            jscc_steps: 1000,
            jscc_batch_size: 32,
            jscc_lr: 1e-4,
            jscc_filters: 32,
            jscc_depth: 4,
            ddpm_steps: 1000,
            ddpm_batch_size: 32,
            ddpm_lr: 2e-4,
            ddpm_width: 32,
            ddpm_time_dim: 32,
            inn_steps: 1000,
            inn_batch_size: 32,
            inn_lr: 5e-5,
            inn_hidden: 32,
            inn_pairs: 4,
            inn_blocks: 2,
            eval_split: Split::Test,
            eval_max_images: None,
        }
    }
}

/// Names of all recognised keys.
pub fn known_keys() -> Vec<String> {
    match serde_json::to_value(ExperimentConfig::default()) {
        Ok(serde_json::Value::Object(map)) => map.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

impl ExperimentConfig {
    /// Parses a TOML document. Unknown keys and invalid values are reported
    /// together, by key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Validation {
            keys: Vec::new(),
            message: e.message().to_string(),
        })?;
        let known = known_keys();
        let unknown: Vec<String> = table
            .keys()
            .filter(|k| !known.iter().any(|n| n == *k))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Validation {
                keys: unknown,
                message: "unknown key".into(),
            });
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| {
            let key = e.message().split('`').nth(1).map(str::to_string);
            Error::Validation {
                keys: key.into_iter().collect(),
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset_dir);
        fix(&mut self.output_dir);
        for p in [&mut self.jscc_checkpoint, &mut self.ddpm_checkpoint, &mut self.inn_checkpoint]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every value and reports all offending keys at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<(&str, String)> = Vec::new();
        if self.version != CONFIG_VERSION {
            bad.push(("version", format!("unsupported version {}", self.version)));
        }
        if self.split[0] == 0 || self.split.iter().map(|&v| v as u64).sum::<u64>() == 0 {
            bad.push(("split", "training share must be positive".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            bad.push(("channels", "must be 1 or 3".into()));
        }
        let stride = 1usize << self.jscc_depth.min(16);
        if self.image_size == 0 || !self.image_size.is_multiple_of(stride) {
            bad.push(("image_size", format!("must be a positive multiple of 2^jscc_depth = {stride}")));
        }
        if !self.image_size.is_multiple_of(2) {
            bad.push(("image_size", "must be even".into()));
        }
        if !(self.bcr > 0.0 && self.bcr <= 1.0) || self.jscc_config().channel_uses() == 0 {
            bad.push(("bcr", "must give at least one channel use".into()));
        }
        if self.snr_grid.is_empty() || self.snr_grid.iter().any(|s| !s.is_finite()) {
            bad.push(("snr_grid", "must be a non-empty list of finite values".into()));
        }
        let mut methods = self.methods.clone();
        methods.sort();
        methods.dedup();
        if self.methods.is_empty() || methods.len() != self.methods.len() {
            bad.push(("methods", "must be non-empty without duplicates".into()));
        }
        match self.operator {
            OperatorKind::MeanPool => {
                if self.scale < 1 || !self.image_size.is_multiple_of(self.scale.max(1)) {
                    bad.push(("scale", "must be >= 1 and divide image_size".into()));
                }
            }
            OperatorKind::Decolorize if self.channels != 3 => {
                bad.push(("operator", "decolorize needs 3-channel images".into()));
            }
            _ => {}
        }
        if self.methods.contains(&Method::SingInn) && CondInnConfig::for_operator(&self.operator(), self.channels).is_err() {
            bad.push(("operator", "sing_inn needs mean_pool with scale >= 2 or decolorize".into()));
        }
        if self.t_total == 0 {
            bad.push(("t_total", "must be >= 1".into()));
        }
        if self.t_effective == 0 || self.t_effective > self.t_total {
            bad.push(("t_effective", "must lie in 1..=t_total".into()));
        }
        if let Some(z) = self.zeta {
            if !(z >= 0.0) || !z.is_finite() {
                bad.push(("zeta", "must be finite and >= 0".into()));
            }
        }
        if !(self.lambda_perceptual >= 0.0) {
            bad.push(("lambda_perceptual", "must be >= 0".into()));
        }
        if !(self.train_snr_min <= self.train_snr_max) || !self.train_snr_min.is_finite() || !self.train_snr_max.is_finite() {
            bad.push(("train_snr_min", "range must be finite with min <= max".into()));
        }
        for (key, lr) in [("jscc_lr", self.jscc_lr), ("ddpm_lr", self.ddpm_lr), ("inn_lr", self.inn_lr)] {
            if !(lr > 0.0) || !lr.is_finite() {
                bad.push((key, "must be positive".into()));
            }
        }
        for (key, v) in [
            ("jscc_batch_size", self.jscc_batch_size),
            ("ddpm_batch_size", self.ddpm_batch_size),
            ("inn_batch_size", self.inn_batch_size),
            ("jscc_filters", self.jscc_filters),
            ("jscc_depth", self.jscc_depth),
            ("ddpm_width", self.ddpm_width),
            ("ddpm_time_dim", self.ddpm_time_dim),
            ("inn_hidden", self.inn_hidden),
            ("inn_pairs", self.inn_pairs),
            ("inn_blocks", self.inn_blocks),
        ] {
            if v == 0 {
                bad.push((key, "must be >= 1".into()));
            }
        }
        if self.eval_max_images == Some(0) {
            bad.push(("eval_max_images", "must be >= 1".into()));
        }
        if bad.is_empty() {
            return Ok(());
        }
        let mut keys: Vec<String> = bad.iter().map(|(k, _)| k.to_string()).collect();
        keys.dedup();
        let message = bad
            .iter()
            .map(|(k, m)| format!("{k}: {m}"))
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::Validation { keys, message })
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).unwrap_or_default().as_bytes())
    }

    pub fn operator(&self) -> LinearDegradation {
        match self.operator {
            OperatorKind::Identity => LinearDegradation::Identity,
            OperatorKind::MeanPool => LinearDegradation::MeanPool { scale: self.scale },
            OperatorKind::Decolorize => LinearDegradation::Decolorize,
        }
    }

    pub fn jscc_config(&self) -> JsccConfig {
        JsccConfig {
            height: self.image_size,
            width: self.image_size,
            channels: self.channels,
            bcr: self.bcr,
            filters: self.jscc_filters,
            depth: self.jscc_depth,
            lambda_perceptual: self.lambda_perceptual,
            ..Default::default()
        }
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            channels: self.channels,
            width: self.ddpm_width,
            time_dim: self.ddpm_time_dim,
            zero_init_output: true,
            timesteps: self.t_total,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            parametrization: Parametrization::Preconditioned,
        }
    }

    pub fn inn_config(&self) -> Result<CondInnConfig> {
        let mut cfg = CondInnConfig::for_operator(&self.operator(), self.channels)?;
        cfg.hidden = self.inn_hidden;
        cfg.pairs = self.inn_pairs;
        cfg.blocks_per_net = self.inn_blocks;
        cfg.snr_range = (self.train_snr_min, self.train_snr_max);
        Ok(cfg)
    }

    pub fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        let explicit = match stage {
            Stage::Jscc => &self.jscc_checkpoint,
            Stage::Ddpm => &self.ddpm_checkpoint,
            Stage::Inn => &self.inn_checkpoint,
        };
        explicit
            .clone()
            .unwrap_or_else(|| self.output_dir.join("checkpoints").join(format!("{}.safetensors", stage.name())))
    }

    pub fn splits_dir(&self) -> PathBuf {
        self.output_dir.join("splits")
    }
}

/// Trainable pipeline component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Jscc,
    Ddpm,
    Inn,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Jscc => "jscc",
            Stage::Ddpm => "ddpm",
            Stage::Inn => "inn",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jscc" => Ok(Stage::Jscc),
            "ddpm" => Ok(Stage::Ddpm),
            "inn" => Ok(Stage::Inn),
            other => Err(Error::Config(format!("unknown component `{other}` (jscc, ddpm, inn)"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.split, [8, 1, 1]);
        assert_eq!(cfg.snr_grid, vec![-5.0, -3.0, -1.0, 1.0, 3.0, 5.0]);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig {
            zeta: Some(0.2),
            eval_max_images: Some(3),
            methods: vec![Method::SingZero],
            ..Default::default()
        };
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_listed() {
        let err = ExperimentConfig::from_toml_str("seed = 1\nsnr_gird = [1.0]\nfoo = 2\n").unwrap_err();
        match err {
            Error::Validation { keys, .. } => {
                assert!(keys.contains(&"snr_gird".to_string()));
                assert!(keys.contains(&"foo".to_string()));
                assert_eq!(keys.len(), 2);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn bad_values_name_their_keys() {
        let err = ExperimentConfig::from_toml_str("t_effective = 0\nzeta = -1.0\n").unwrap_err();
        match err {
            Error::Validation { keys, .. } => assert_eq!(keys, vec!["t_effective", "zeta"]),
            e => panic!("unexpected {e}"),
        }
        let err = ExperimentConfig::from_toml_str("seed = \"x\"\n").unwrap_err();
        assert!(matches!(err, Error::Validation { .. }));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 1, ..Default::default() };
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn default_checkpoint_layout() {
        let cfg = ExperimentConfig::default();
        assert!(cfg.checkpoint_path(Stage::Inn).ends_with("checkpoints/inn.safetensors"));
        assert_eq!("ddpm".parse::<Stage>().unwrap(), Stage::Ddpm);
        assert!("vae".parse::<Stage>().is_err());
    }
}
