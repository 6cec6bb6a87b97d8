//! Layered settings: built-in table, then the config file, then flags.
//!
//! The file is INI-style (`[section]` headers, `key = value` lines, `#` or
//! `;` comments). Every key it may contain is listed in [`DEFAULTS`].

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;
use moctefuse::fusion::FusionConfig;
use moctefuse::gate::GateConfig;
use moctefuse::losses::LossWeights;
use moctefuse::trainer::{CropModeName, TrainConfig};

use crate::exit::CliError;

/// Environment variable that replaces the built-in default seed.
pub const SEED_ENV: &str = "MOCTEFUSE_SEED";

pub struct Key {
    pub section: &'static str,
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn k(section: &'static str, key: &'static str, default: &'static str, help: &'static str) -> Key {
    Key { section, key, default, help }
}

/// Every configurable value with its default.
pub const DEFAULTS: &[Key] = &[
    k("fusion", "channels", "16", "feature channels C"),
    k("fusion", "depth", "2", "CTFBs per expert"),
    k("fusion", "window", "8", "attention window side M"),
    k("fusion", "heads", "2", "attention heads"),
    k("fusion", "ffn_ratio", "2", "FFN hidden width as a multiple of C"),
    k("fusion", "encoder_rtb", "1", "transformer blocks per encoder"),
    k("fusion", "encoder_rdb", "1", "residual dense blocks per encoder"),
    k("gate", "widths", "64,128,256,512", "channels of the four residual stages"),
    k("gate", "blocks", "2,2,2,2", "residual blocks per stage"),
    k("gate", "input_size", "128", "square side the visible image is resized to (0 = native)"),
    k("loss", "alpha", "1", "intensity term weight"),
    k("loss", "beta", "5", "gradient term weight"),
    k("loss", "gamma", "10", "SSIM term weight"),
    k("loss", "w1", "0.5", "SSIM weight of the infrared source (visible gets 1 - w1)"),
    k("train_gate", "epochs", "60", "training epochs"),
    k("train_gate", "batch_size", "8", "images per update"),
    k("train_gate", "lr", "1e-4", "peak learning rate"),
    k("train_gate", "min_lr", "1e-6", "final learning rate"),
    k("train_gate", "warmup_epochs", "3", "linear warmup length"),
    k("train_gate", "seed", "0", "initialization and shuffling seed"),
    k("train_fuse", "epochs", "60", "training epochs"),
    k("train_fuse", "batch_size", "8", "pairs per update"),
    k("train_fuse", "lr", "1e-4", "peak learning rate"),
    k("train_fuse", "min_lr", "1e-6", "final learning rate"),
    k("train_fuse", "warmup_epochs", "3", "linear warmup length"),
    k("train_fuse", "seed", "0", "initialization, shuffling and crop seed"),
    k("train_fuse", "crop_size", "128", "square training crop side"),
    k("train_fuse", "crop_mode", "random", "random (crop) or resize"),
];

#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<(String, String), String>,
}

impl Settings {
    /// The built-in table, with the seed taken from [`SEED_ENV`] when set.
    pub fn defaults() -> Result<Self, CliError> {
        let mut values: BTreeMap<(String, String), String> = DEFAULTS
            .iter()
            .map(|d| ((d.section.to_string(), d.key.to_string()), d.default.to_string()))
            .collect();
        if let Ok(seed) = std::env::var(SEED_ENV) {
            seed.trim()
                .parse::<u64>()
                .map_err(|_| CliError::input(format!("{SEED_ENV}=`{seed}` is not an unsigned integer")))?;
            for s in ["train_gate", "train_fuse"] {
                values.insert((s.into(), "seed".into()), seed.trim().to_string());
            }
        }
        Ok(Self { values })
    }

    /// Defaults overlaid with `file` (if any).
    pub fn load(file: Option<&Path>) -> Result<Self, CliError> {
        let mut s = Self::defaults()?;
        if let Some(path) = file {
            let ini = Ini::load_from_file(path)
                .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
            for (section, props) in ini.iter() {
                let section = section.unwrap_or("");
                for (key, value) in props.iter() {
                    s.set(section, key, value)
                        .map_err(|e| CliError::input(format!("{}: {}", path.display(), e.message)))?;
                }
            }
        }
        Ok(s)
    }

    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), CliError> {
        let slot = (section.to_string(), key.to_string());
        if !self.values.contains_key(&slot) {
            return Err(CliError::input(format!("unknown setting `{section}.{key}`")));
        }
        self.values.insert(slot, value.trim().to_string());
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<(), CliError> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::input(format!("override `{assignment}` is not section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| CliError::input(format!("override `{assignment}` is not section.key=value")))?;
        self.set(section, key, value)
    }

    pub fn raw(&self, section: &str, key: &str) -> &str {
        self.values
            .get(&(section.to_string(), key.to_string()))
            .map(String::as_str)
            .unwrap_or_else(|| panic!("`{section}.{key}` missing from the defaults table"))
    }

    fn get<T: FromStr>(&self, section: &str, key: &str) -> Result<T, CliError> {
        let v = self.raw(section, key);
        v.parse()
            .map_err(|_| CliError::input(format!("`{section}.{key}` has invalid value `{v}`")))
    }

    fn get_four(&self, section: &str, key: &str) -> Result<[usize; 4], CliError> {
        let v = self.raw(section, key);
        let parts: Vec<usize> = v
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::input(format!("`{section}.{key}` = `{v}` is not a list of integers")))?;
        parts
            .try_into()
            .map_err(|_| CliError::input(format!("`{section}.{key}` needs exactly four values, got `{v}`")))
    }

    pub fn fusion(&self) -> Result<FusionConfig, CliError> {
        let s = "fusion";
        let cfg = FusionConfig {
            channels: self.get(s, "channels")?,
            depth: self.get(s, "depth")?,
            window: self.get(s, "window")?,
            heads: self.get(s, "heads")?,
            ffn_ratio: self.get(s, "ffn_ratio")?,
            encoder_rtb: self.get(s, "encoder_rtb")?,
            encoder_rdb: self.get(s, "encoder_rdb")?,
        };
        cfg.validate().map_err(CliError::from_input)?;
        Ok(cfg)
    }

    pub fn gate(&self) -> Result<GateConfig, CliError> {
        let cfg = GateConfig {
            widths: self.get_four("gate", "widths")?,
            blocks: self.get_four("gate", "blocks")?,
            input_size: self.get("gate", "input_size")?,
        };
        cfg.validate().map_err(CliError::from_input)?;
        Ok(cfg)
    }

    pub fn loss(&self) -> Result<LossWeights, CliError> {
        let w = LossWeights {
            alpha: self.get("loss", "alpha")?,
            beta: self.get("loss", "beta")?,
            gamma: self.get("loss", "gamma")?,
            w1: self.get("loss", "w1")?,
        };
        w.validate().map_err(CliError::from_input)?;
        Ok(w)
    }

    /// Training settings of `train_gate` or `train_fuse`.
    pub fn train(&self, section: &str) -> Result<TrainConfig, CliError> {
        let mut tc = TrainConfig {
            epochs: self.get(section, "epochs")?,
            batch_size: self.get(section, "batch_size")?,
            lr: self.get(section, "lr")?,
            min_lr: self.get(section, "min_lr")?,
            warmup_epochs: self.get(section, "warmup_epochs")?,
            seed: self.get(section, "seed")?,
            ..TrainConfig::default()
        };
        if section == "train_fuse" {
            tc.crop_size = self.get(section, "crop_size")?;
            tc.crop_mode = match self.raw(section, "crop_mode") {
                "random" => CropModeName::Random,
                "resize" => CropModeName::Resize,
                other => return Err(CliError::input(format!("`{section}.crop_mode` must be random or resize, got `{other}`"))),
            };
        }
        tc.validate().map_err(CliError::from_input)?;
        Ok(tc)
    }
}
