//! Training configuration and its `key = value` text form.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// The four ablation modes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// SS network only; no SE network, one loss.
    BaselineSs,
    /// SE network present but its loss weighted by zero.
    UnifiedNoSeLoss,
    Unified,
    UnifiedGm,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::BaselineSs, Mode::UnifiedNoSeLoss, Mode::Unified, Mode::UnifiedGm];

    pub fn has_se_net(self) -> bool {
        self != Mode::BaselineSs
    }

    pub fn modulates(self) -> bool {
        self == Mode::UnifiedGm
    }

    /// Weight of the SE loss actually applied in this mode.
    pub fn effective_lambda(self, lambda_se: f64) -> f64 {
        match self {
            Mode::BaselineSs | Mode::UnifiedNoSeLoss => 0.0,
            Mode::Unified | Mode::UnifiedGm => lambda_se,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::BaselineSs => "baseline-ss",
            Mode::UnifiedNoSeLoss => "unified-nose-loss",
            Mode::Unified => "unified",
            Mode::UnifiedGm => "unified+gm",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub lr: f64,
    pub epochs: usize,
    pub clip_norm: f64,
    pub lambda_se: f64,
    pub patience: usize,
    pub halve_after_epoch: usize,
    /// Seeds parameter init and the per-epoch sample order.
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::UnifiedGm,
            lr: 1.5e-4,
            epochs: 30,
            clip_norm: 5.0,
            lambda_se: crate::losses::DEFAULT_LAMBDA_SE,
            patience: 5,
            halve_after_epoch: 10,
            seed: 0,
            model: ModelConfig::default(),
            data: DatasetSpec::default(),
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], in output order.
pub const KEYS: &[&str] = &[
    "mode",
    "lr",
    "epochs",
    "clip_norm",
    "lambda_se",
    "patience",
    "halve_after_epoch",
    "seed",
    "filters",
    "kernel",
    "stride",
    "chunk",
    "se_blocks",
    "ss_blocks",
    "hidden",
    "sources",
    "num_train",
    "num_valid",
    "num_test",
    "len",
    "data_seed",
    "snr_mean_db",
    "snr_std_db",
    "noise",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be > 0".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.lambda_se >= 0.0 && self.lambda_se.is_finite()) {
            return Err(Error::Config("lambda_se must be >= 0".into()));
        }
        if self.model.sources != self.data.sources {
            return Err(Error::Config("model and data disagree on the number of sources".into()));
        }
        self.model.validate()?;
        self.data.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "mode" => self.mode = v.parse()?,
            "lr" => self.lr = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "lambda_se" => self.lambda_se = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "halve_after_epoch" => self.halve_after_epoch = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "filters" => self.model.filters = parse(key, v)?,
            "kernel" => self.model.kernel = parse(key, v)?,
            "stride" => self.model.stride = parse(key, v)?,
            "chunk" => self.model.chunk = parse(key, v)?,
            "se_blocks" => self.model.se_blocks = parse(key, v)?,
            "ss_blocks" => self.model.ss_blocks = parse(key, v)?,
            "hidden" => self.model.hidden = parse(key, v)?,
            "sources" => {
                self.model.sources = parse(key, v)?;
                self.data.sources = self.model.sources;
            }
            "num_train" => self.data.num_train = parse(key, v)?,
            "num_valid" => self.data.num_valid = parse(key, v)?,
            "num_test" => self.data.num_test = parse(key, v)?,
            "len" => self.data.len = parse(key, v)?,
            "data_seed" => self.data.seed = parse(key, v)?,
            "snr_mean_db" => self.data.snr_mean_db = parse(key, v)?,
            "snr_std_db" => self.data.snr_std_db = parse(key, v)?,
            "noise" => self.data.noise = v.parse()?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let d = &self.data;
        Some(match key {
            "mode" => self.mode.to_string(),
            "lr" => self.lr.to_string(),
            "epochs" => self.epochs.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "lambda_se" => self.lambda_se.to_string(),
            "patience" => self.patience.to_string(),
            "halve_after_epoch" => self.halve_after_epoch.to_string(),
            "seed" => self.seed.to_string(),
            "filters" => m.filters.to_string(),
            "kernel" => m.kernel.to_string(),
            "stride" => m.stride.to_string(),
            "chunk" => m.chunk.to_string(),
            "se_blocks" => m.se_blocks.to_string(),
            "ss_blocks" => m.ss_blocks.to_string(),
            "hidden" => m.hidden.to_string(),
            "sources" => m.sources.to_string(),
            "num_train" => d.num_train.to_string(),
            "num_valid" => d.num_valid.to_string(),
            "num_test" => d.num_test.to_string(),
            "len" => d.len.to_string(),
            "data_seed" => d.seed.to_string(),
            "snr_mean_db" => d.snr_mean_db.to_string(),
            "snr_std_db" => d.snr_std_db.to_string(),
            "noise" => d.noise.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_kv(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(text)?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(&std::fs::read_to_string(path)?)
    }

    pub fn to_kv(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }
}
