//! `key = value` configuration with dotted keys.
//!
//! `#` starts a comment, blank lines are ignored, later assignments win,
//! and unknown keys are errors. [`Config::to_text`] writes every key, so
//! a stored config re-parses to an identical value.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::train::TrainConfig;

/// Where the correlation mask comes from.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskConfig {
    /// Stored mask grid; when absent the mask is estimated from data.
    pub path: Option<PathBuf>,
    pub threshold: f64,
    /// Estimation radius; must cover the larger kernel footprint.
    pub radius: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig { path: None, threshold: 0.05, radius: 10 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub mask: MaskConfig,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value '{v}' for {key}")))
}

struct Key {
    name: &'static str,
    doc: &'static str,
    get: fn(&Config) -> String,
    set: fn(&mut Config, &str, &str) -> Result<()>,
}

macro_rules! key {
    ($name:literal, $doc:literal, $($field:ident).+) => {
        Key {
            name: $name,
            doc: $doc,
            get: |c| c.$($field).+.to_string(),
            set: |c, k, v| {
                c.$($field).+ = parse(k, v)?;
                Ok(())
            },
        }
    };
}

const KEYS: &[Key] = &[
    key!("network.in_channels", "input channels", network.in_channels),
    key!("network.out_channels", "output channels", network.out_channels),
    key!("network.width", "base feature width C", network.width),
    key!("network.local_footprint", "local masked kernel side", network.local_footprint),
    key!("network.local_dilation", "local masked kernel dilation", network.local_dilation),
    key!("network.local_layers", "3x3 layers in the local body", network.local_layers),
    key!("network.local_conv_dilation", "dilation of the local body", network.local_conv_dilation),
    key!("network.global_footprint", "global masked kernel side", network.global_footprint),
    key!("network.global_dilation", "global masked kernel dilation", network.global_dilation),
    key!("network.dtb_count", "dilated Transformer blocks", network.dtb_count),
    key!("network.dtb_dilation", "depthwise dilation inside blocks", network.dtb_dilation),
    key!("network.expansion", "feed-forward width multiplier", network.expansion),
    key!("network.pd_train", "PD stride in train mode", network.pd_train),
    key!("network.pd_test", "PD stride in test mode", network.pd_test),
    key!("network.shift_ratio", "test-mode kernel shift, in (-1, 0]", network.shift_ratio),
    key!("train.batch", "patches per step", train.batch),
    key!("train.lr", "Adam learning rate", train.lr),
    key!("train.epochs", "passes over the dataset", train.epochs),
    key!("train.patch", "square crop side", train.patch),
    key!("train.seed", "shuffle and crop seed", train.seed),
    key!("train.log_every", "steps between metric rows (0: end only)", train.log_every),
    key!("train.checkpoint_every", "steps between checkpoints (0: end only)", train.checkpoint_every),
    key!("train.lr_halve", "halve the rate at half the steps", train.lr_halve),
    key!("train.grad_clip", "global gradient-norm ceiling (0: off)", train.grad_clip),
    key!("train.supervised", "train against clean images", train.supervised),
    key!("train.eval_count", "held-out images evaluated per metric row", train.eval_count),
    key!("mask.threshold", "correlation threshold for masking an offset", mask.threshold),
    key!("mask.radius", "correlation estimation radius", mask.radius),
    Key {
        name: "mask.path",
        doc: "stored mask grid (empty: estimate from data)",
        get: |c| c.mask.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        set: |c, _, v| {
            c.mask.path = if v.is_empty() { None } else { Some(PathBuf::from(v)) };
            Ok(())
        },
    },
];

impl Config {
    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let k = KEYS.iter().find(|k| k.name == key).ok_or_else(|| Error::Config(format!("unknown key '{key}'")))?;
        (k.set)(self, key, value.trim())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let k = KEYS.iter().find(|k| k.name == key).ok_or_else(|| Error::Config(format!("unknown key '{key}'")))?;
        Ok((k.get)(self))
    }

    /// Applies `text` on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if !(self.mask.threshold > 0.0 && self.mask.threshold < 1.0) {
            return Err(Error::Config("mask.threshold must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Every key with its current value.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|k| format!("{} = {}\n", k.name, (k.get)(self))).collect()
    }

    /// Every key with its default and a one-line description.
    pub fn reference() -> String {
        let d = Config::default();
        KEYS.iter().map(|k| format!("{} = {}  # {}\n", k.name, (k.get)(&d), k.doc)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_text() {
        let c = Config::default();
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
        assert_eq!(Config::parse(&Config::reference()).unwrap(), c);
        assert_eq!(c.mask.threshold, 0.05);
        assert_eq!(c.train.batch, 8);
    }

    #[test]
    fn later_keys_override_and_comments_are_ignored() {
        let c = Config::parse("# header\nnetwork.width = 16\n\ntrain.lr=0.001 # faster\nnetwork.width = 24\nmask.path = m.txt\n").unwrap();
        assert_eq!(c.network.width, 24);
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!(c.mask.path, Some(PathBuf::from("m.txt")));
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn odd_floats_roundtrip_exactly() {
        let mut c = Config::default();
        c.network.shift_ratio = -0.1 - 0.2;
        c.train.lr = 1.0 / 3.0;
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn errors() {
        assert!(Config::parse("network.widht = 3").is_err());
        assert!(Config::parse("network.width").is_err());
        assert!(Config::parse("network.width = many").is_err());
        assert!(Config::parse("train.supervised = yes").is_err());
        let err = Config::parse("\n\nbogus = 1").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let mut c = Config::default();
        c.mask.threshold = 1.5;
        assert!(c.validate().is_err());
    }
}
