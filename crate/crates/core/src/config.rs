//! Experiment configuration as flat `key = value` lines with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::models::{LossWeights, Variant};
use crate::optim::AdamConfig;
use crate::train::TrainConfig;

/// Everything a run of the command-line pipeline depends on.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub variant: Variant,
    /// Standardized side `S` of the classifier input.
    pub side: usize,
    pub latent: usize,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub epochs_stage1: usize,
    /// Epochs of joint training and of baseline training.
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub augment: bool,
    /// Seeds model initialization, batch order and augmentation.
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            dataset: DatasetSpec::default(),
            variant: Variant::XceptionMini,
            side: 48,
            latent: 256,
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            epochs_stage1: 100,
            epochs_stage2: 100,
            batch_size: t.batch_size,
            patience: t.patience,
            min_delta: t.min_delta,
            augment: t.augment,
            seed: 1,
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// `(key, description)` in file order.
pub const KEYS: [(&str, &str); 28] = [
    ("samples_per_class", "synthetic images per class"),
    ("min_width", "smallest generated width"),
    ("min_height", "smallest generated height"),
    ("max_width", "largest generated width"),
    ("max_height", "largest generated height"),
    ("aspect_min", "lower bound on width / height"),
    ("aspect_max", "upper bound on width / height"),
    ("clutter", "background clutter and noise level in [0, 1]"),
    ("jitter", "global gain jitter in [0, 1)"),
    ("data_seed", "seed of the synthetic dataset and of the train/val/test split"),
    ("variant", "classifier: xception-mini or inception-mini"),
    ("side", "standardized image side S"),
    ("latent", "autoencoder latent size d"),
    ("lambda1", "weight of the perceptual term"),
    ("lambda2", "weight of the landmark term"),
    ("alpha", "weight of the classification loss in joint training"),
    ("perceptual_stage", "perceptual extractor stage, 1 to 3"),
    ("lr", "Adam learning rate"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("eps", "Adam denominator epsilon"),
    ("strict_adam", "true: no bias correction of the second moment"),
    ("epochs_stage1", "autoencoder pretraining epochs"),
    ("epochs_stage2", "joint and baseline training epochs"),
    ("batch_size", "mini-batch size"),
    ("patience", "early-stopping patience in epochs"),
    ("min_delta", "smallest validation-loss decrease that counts as improvement"),
    ("augment", "random rotation, brightness and contrast during training"),
];

const SEED_KEYS: [(&str, &str); 2] = [("seed", "training seed"), ("out_dir", "output directory")];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl ExperimentConfig {
    fn get(&self, key: &str) -> Option<String> {
        let d = &self.dataset;
        Some(match key {
            "samples_per_class" => d.samples_per_class.to_string(),
            "min_width" => d.min_width.to_string(),
            "min_height" => d.min_height.to_string(),
            "max_width" => d.max_width.to_string(),
            "max_height" => d.max_height.to_string(),
            "aspect_min" => d.aspect_min.to_string(),
            "aspect_max" => d.aspect_max.to_string(),
            "clutter" => d.clutter.to_string(),
            "jitter" => d.jitter.to_string(),
            "data_seed" => d.seed.to_string(),
            "variant" => self.variant.to_string(),
            "side" => self.side.to_string(),
            "latent" => self.latent.to_string(),
            "lambda1" => self.loss.lambda1.to_string(),
            "lambda2" => self.loss.lambda2.to_string(),
            "alpha" => self.loss.alpha.to_string(),
            "perceptual_stage" => self.loss.stage.to_string(),
            "lr" => self.adam.lr.to_string(),
            "beta1" => self.adam.beta1.to_string(),
            "beta2" => self.adam.beta2.to_string(),
            "eps" => self.adam.eps.to_string(),
            "strict_adam" => self.adam.uncorrected_v.to_string(),
            "epochs_stage1" => self.epochs_stage1.to_string(),
            "epochs_stage2" => self.epochs_stage2.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "patience" => self.patience.to_string(),
            "min_delta" => self.min_delta.to_string(),
            "augment" => self.augment.to_string(),
            "seed" => self.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.dataset;
        match key {
            "samples_per_class" => d.samples_per_class = parse(key, v)?,
            "min_width" => d.min_width = parse(key, v)?,
            "min_height" => d.min_height = parse(key, v)?,
            "max_width" => d.max_width = parse(key, v)?,
            "max_height" => d.max_height = parse(key, v)?,
            "aspect_min" => d.aspect_min = parse(key, v)?,
            "aspect_max" => d.aspect_max = parse(key, v)?,
            "clutter" => d.clutter = parse(key, v)?,
            "jitter" => d.jitter = parse(key, v)?,
            "data_seed" => d.seed = parse(key, v)?,
            "variant" => self.variant = v.parse()?,
            "side" => self.side = parse(key, v)?,
            "latent" => self.latent = parse(key, v)?,
            "lambda1" => self.loss.lambda1 = parse(key, v)?,
            "lambda2" => self.loss.lambda2 = parse(key, v)?,
            "alpha" => self.loss.alpha = parse(key, v)?,
            "perceptual_stage" => self.loss.stage = parse(key, v)?,
            "lr" => self.adam.lr = parse(key, v)?,
            "beta1" => self.adam.beta1 = parse(key, v)?,
            "beta2" => self.adam.beta2 = parse(key, v)?,
            "eps" => self.adam.eps = parse(key, v)?,
            "strict_adam" => self.adam.uncorrected_v = parse(key, v)?,
            "epochs_stage1" => self.epochs_stage1 = parse(key, v)?,
            "epochs_stage2" => self.epochs_stage2 = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "min_delta" => self.min_delta = parse(key, v)?,
            "augment" => self.augment = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every `(key, value)` pair in file order.
    pub fn entries(&self) -> Vec<(String, String)> {
        KEYS.iter().chain(&SEED_KEYS).map(|(k, _)| (k.to_string(), self.get(k).expect("known key"))).collect()
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are ignored; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)));
            };
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: {k} given twice", i + 1)));
            }
            cfg.set(k, v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// The file form, each key preceded by its description and default.
    pub fn render(&self) -> String {
        let defaults = Self::default();
        let mut s = String::new();
        for (k, doc) in KEYS.iter().chain(&SEED_KEYS) {
            let _ = writeln!(s, "# {doc} (default {})", defaults.get(k).expect("known key"));
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        if self.side < crate::models::MIN_INPUT_SIDE {
            return Err(Error::Config(format!("side must be at least {}, got {}", crate::models::MIN_INPUT_SIDE, self.side)));
        }
        if self.latent == 0 {
            return Err(Error::Config("latent size must be positive".into()));
        }
        self.train_config(0).validate()
    }

    /// Training settings for a stage of `epochs` epochs.
    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: self.batch_size,
            adam: self.adam,
            patience: self.patience,
            min_delta: self.min_delta,
            seed: self.seed,
            augment: self.augment,
            loss: self.loss,
            threads: 1,
        }
    }
}
