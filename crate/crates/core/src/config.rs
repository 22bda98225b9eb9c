//! Experiment configuration: a plain-text key=value file holding every
//! tunable of every stage. Unknown keys are rejected, every default is
//! explicit in the dump, and the master seed is mandatory.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::dataset::PhantomConfig;
use crate::labels::DeformParams;
use crate::losses::{LossWeights, PerceptualMode};
use crate::rng::derive_seed;
use crate::training::{AugMode, AugmentationMode, DeformOrder, OptimizerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {line_no} is not key=value: {text:?}")]
    MalformedLine { line_no: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key} has invalid value {value:?}: {reason}")]
    BadValue {
        key: &'static str,
        value: String,
        reason: String,
    },
    #[error("config key {key} duplicated on line {line_no}")]
    DuplicateKey { key: String, line_no: usize },
    #[error("config is missing the mandatory key `seed`")]
    MissingSeed,
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Every tunable of the pipeline. Stage seeds are derived from the single
/// master seed, so one integer pins the whole experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub num_cases: usize,
    pub height: usize,
    pub width: usize,
    pub tumor_probability: f64,
    pub noise_std: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub deform_alpha: f64,
    pub deform_sigma: f64,
    pub deform_order: DeformOrder,
    pub gan: OptimizerConfig,
    pub gan_checkpoint_every: usize,
    pub lambda_boundary: f64,
    pub lambda_perceptual: f64,
    pub perceptual_mode: PerceptualMode,
    pub gan_filters_div: usize,
    pub seg: OptimizerConfig,
    pub seg_filters_div: usize,
    pub aug_mode: AugMode,
    pub mix_probability: f64,
    pub synth_count: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("data"),
            num_cases: 50,
            height: 64,
            width: 64,
            tumor_probability: 0.9,
            noise_std: 0.05,
            val_fraction: 0.15,
            test_fraction: 0.15,
            deform_alpha: 300.0,
            deform_sigma: 10.0,
            deform_order: DeformOrder::RawFirst,
            gan: OptimizerConfig {
                seed: 0,
                ..OptimizerConfig::default()
            },
            gan_checkpoint_every: 500,
            lambda_boundary: 10.0,
            lambda_perceptual: 10.0,
            perceptual_mode: PerceptualMode::Matched,
            gan_filters_div: 1,
            seg: OptimizerConfig {
                iterations: 30,
                ..OptimizerConfig::default()
            },
            seg_filters_div: 1,
            aug_mode: AugMode::None,
            mix_probability: 0.5,
            synth_count: 8,
        }
    }
}

/// (key, default-as-text, description) for every recognized key, in dump
/// order. The parser and the dump share this table so they cannot drift.
const KEY_TABLE: &[(&str, &str, &str)] = &[
    ("seed", "0", "master seed; mandatory, every stage derives from it"),
    ("data.dir", "data", "directory holding case subdirectories"),
    ("data.num_cases", "50", "phantom cases to generate"),
    ("data.height", "64", "slice height in pixels (multiple of 32)"),
    ("data.width", "64", "slice width in pixels (multiple of 32)"),
    ("data.tumor_probability", "0.9", "chance a phantom case carries a tumor"),
    ("data.noise_std", "0.05", "phantom acquisition noise"),
    ("data.val_fraction", "0.15", "validation share of the case split"),
    ("data.test_fraction", "0.15", "test share of the case split"),
    ("deform.alpha", "300", "elastic displacement magnitude in pixels"),
    ("deform.sigma", "10", "elastic field smoothing scale in pixels"),
    ("deform.order", "raw_first", "deform raw labels or the semantic map (raw_first|semantic_first)"),
    ("gan.learning_rate", "0.0002", "Adam learning rate for both adversaries"),
    ("gan.beta1", "0.5", "Adam beta1 for both adversaries"),
    ("gan.beta2", "0.999", "Adam beta2 for both adversaries"),
    ("gan.batch_size", "4", "slices per adversarial iteration"),
    ("gan.iterations", "2000", "adversarial iterations"),
    ("gan.checkpoint_every", "500", "checkpoint cadence in iterations (0 = only final)"),
    ("gan.lambda_boundary", "10", "boundary-loss weight"),
    ("gan.lambda_perceptual", "10", "perceptual-loss weight"),
    ("gan.perceptual_mode", "matched", "feature pairing for the perceptual loss (matched|printed)"),
    ("gan.filters_div", "1", "divide every GAN layer width by this (miniature runs)"),
    ("seg.learning_rate", "0.0002", "Adam learning rate for segmentation"),
    ("seg.beta1", "0.5", "Adam beta1 for segmentation"),
    ("seg.beta2", "0.999", "Adam beta2 for segmentation"),
    ("seg.batch_size", "4", "slices per segmentation step"),
    ("seg.epochs", "30", "segmentation training epochs"),
    ("seg.filters_div", "1", "divide every U-Net layer width by this"),
    ("aug.mode", "none", "training augmentation (none|traditional|proposed)"),
    ("aug.mix_probability", "0.5", "fraction of proposed-mode samples replaced by synthetic pairs"),
    ("synth.count", "8", "cases written by the synth command"),
];

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let known: BTreeSet<&str> = KEY_TABLE.iter().map(|(k, _, _)| *k).collect();
        let mut cfg = ExperimentConfig::default();
        let mut seen = BTreeSet::new();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::MalformedLine {
                    line_no: line_no + 1,
                    text: raw.to_string(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !known.contains(key) {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    key: key.to_string(),
                    line_no: line_no + 1,
                });
            }
            cfg.apply(key, value)?;
        }
        if !seen.contains("seed") {
            return Err(ConfigError::MissingSeed);
        }
        cfg.finish_and_validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: FromStr>(key: &'static str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::BadValue {
                key,
                value: value.to_string(),
                reason: e.to_string(),
            })
        }
        match key {
            "seed" => self.seed = parse("seed", value)?,
            "data.dir" => self.data_dir = PathBuf::from(value),
            "data.num_cases" => self.num_cases = parse("data.num_cases", value)?,
            "data.height" => self.height = parse("data.height", value)?,
            "data.width" => self.width = parse("data.width", value)?,
            "data.tumor_probability" => {
                self.tumor_probability = parse("data.tumor_probability", value)?
            }
            "data.noise_std" => self.noise_std = parse("data.noise_std", value)?,
            "data.val_fraction" => self.val_fraction = parse("data.val_fraction", value)?,
            "data.test_fraction" => self.test_fraction = parse("data.test_fraction", value)?,
            "deform.alpha" => self.deform_alpha = parse("deform.alpha", value)?,
            "deform.sigma" => self.deform_sigma = parse("deform.sigma", value)?,
            "deform.order" => self.deform_order = parse("deform.order", value)?,
            "gan.learning_rate" => self.gan.learning_rate = parse("gan.learning_rate", value)?,
            "gan.beta1" => self.gan.beta1 = parse("gan.beta1", value)?,
            "gan.beta2" => self.gan.beta2 = parse("gan.beta2", value)?,
            "gan.batch_size" => self.gan.batch_size = parse("gan.batch_size", value)?,
            "gan.iterations" => self.gan.iterations = parse("gan.iterations", value)?,
            "gan.checkpoint_every" => {
                self.gan_checkpoint_every = parse("gan.checkpoint_every", value)?
            }
            "gan.lambda_boundary" => self.lambda_boundary = parse("gan.lambda_boundary", value)?,
            "gan.lambda_perceptual" => {
                self.lambda_perceptual = parse("gan.lambda_perceptual", value)?
            }
            "gan.perceptual_mode" => self.perceptual_mode = parse("gan.perceptual_mode", value)?,
            "gan.filters_div" => self.gan_filters_div = parse("gan.filters_div", value)?,
            "seg.learning_rate" => self.seg.learning_rate = parse("seg.learning_rate", value)?,
            "seg.beta1" => self.seg.beta1 = parse("seg.beta1", value)?,
            "seg.beta2" => self.seg.beta2 = parse("seg.beta2", value)?,
            "seg.batch_size" => self.seg.batch_size = parse("seg.batch_size", value)?,
            "seg.epochs" => self.seg.iterations = parse("seg.epochs", value)?,
            "seg.filters_div" => self.seg_filters_div = parse("seg.filters_div", value)?,
            "aug.mode" => self.aug_mode = parse("aug.mode", value)?,
            "aug.mix_probability" => self.mix_probability = parse("aug.mix_probability", value)?,
            "synth.count" => self.synth_count = parse("synth.count", value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    fn finish_and_validate(&mut self) -> Result<(), ConfigError> {
        self.gan.seed = derive_seed(self.seed, "stage.gan", 0);
        self.seg.seed = derive_seed(self.seed, "stage.seg", 0);
        self.gan.validate().map_err(|e| ConfigError::Invalid(format!("gan: {e}")))?;
        self.seg.validate().map_err(|e| ConfigError::Invalid(format!("seg: {e}")))?;
        if self.num_cases == 0 {
            return Err(ConfigError::Invalid("data.num_cases must be positive".into()));
        }
        for (key, v) in [
            ("data.tumor_probability", self.tumor_probability),
            ("aug.mix_probability", self.mix_probability),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ConfigError::Invalid(format!("{key} {v} must lie in [0, 1]")));
            }
        }
        for (key, v) in [
            ("data.val_fraction", self.val_fraction),
            ("data.test_fraction", self.test_fraction),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(ConfigError::Invalid(format!("{key} {v} must lie in [0, 1)")));
            }
        }
        if self.val_fraction + self.test_fraction >= 1.0 {
            return Err(ConfigError::Invalid(
                "val and test fractions must leave room for training cases".into(),
            ));
        }
        if !(self.deform_alpha.is_finite() && self.deform_alpha >= 0.0) {
            return Err(ConfigError::Invalid(format!(
                "deform.alpha {} must be >= 0",
                self.deform_alpha
            )));
        }
        if !(self.deform_sigma.is_finite() && self.deform_sigma > 0.0) {
            return Err(ConfigError::Invalid(format!(
                "deform.sigma {} must be > 0",
                self.deform_sigma
            )));
        }
        for (key, v) in [
            ("gan.lambda_boundary", self.lambda_boundary),
            ("gan.lambda_perceptual", self.lambda_perceptual),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ConfigError::Invalid(format!("{key} {v} must be >= 0")));
            }
        }
        for (key, v) in [
            ("gan.filters_div", self.gan_filters_div),
            ("seg.filters_div", self.seg_filters_div),
        ] {
            if v == 0 {
                return Err(ConfigError::Invalid(format!("{key} must be positive")));
            }
        }
        Ok(())
    }

    /// The default configuration as a commented key=value file. Parsing the
    /// dump reproduces the defaults, making every default explicit.
    pub fn dump_defaults() -> String {
        let mut out = String::new();
        out.push_str("# Every recognized key with its default value.\n");
        out.push_str("# `seed` is mandatory: a file without it is rejected.\n");
        for (key, default, doc) in KEY_TABLE {
            let _ = writeln!(out, "# {doc}");
            let _ = writeln!(out, "{key}={default}");
        }
        out
    }

    pub fn phantom(&self) -> PhantomConfig {
        PhantomConfig {
            num_cases: self.num_cases,
            height: self.height,
            width: self.width,
            tumor_probability: self.tumor_probability,
            noise_std: self.noise_std,
            seed: derive_seed(self.seed, "stage.phantom", 0),
        }
    }

    pub fn deform(&self) -> DeformParams {
        DeformParams {
            alpha: self.deform_alpha,
            sigma: self.deform_sigma,
            seed: derive_seed(self.seed, "stage.deform", 0),
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda_boundary,
            lambda2: self.lambda_perceptual,
        }
    }

    pub fn augmentation(&self) -> AugmentationMode {
        AugmentationMode {
            mode: self.aug_mode,
            mix_probability: self.mix_probability,
            deform: self.deform(),
        }
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "stage.split", 0)
    }
}
