use std::path::Path;

use crate::error::{Error, Result};
use crate::nets::{ClassifierConfig, UNetConfig};
use crate::optim::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// Classify the whole (preprocessed) radiograph.
    Plain,
    /// Zero everything outside the lung mask before classifying.
    Segmented,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Plain => "plain",
            Scheme::Segmented => "segmented",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plain" => Ok(Scheme::Plain),
            "segmented" | "seg" => Ok(Scheme::Segmented),
            _ => Err(Error::Unknown {
                kind: "scheme",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Prep {
    Original,
    Clahe,
    Complement,
    /// Original, CLAHE and complement stacked as channels.
    ThreeChannel,
}

impl Prep {
    pub const ALL: [Prep; 4] = [Prep::Original, Prep::Clahe, Prep::Complement, Prep::ThreeChannel];

    pub fn name(self) -> &'static str {
        match self {
            Prep::Original => "original",
            Prep::Clahe => "clahe",
            Prep::Complement => "complement",
            Prep::ThreeChannel => "three-channel",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            Prep::ThreeChannel => 3,
            _ => 1,
        }
    }
}

impl std::str::FromStr for Prep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "original" | "none" => Ok(Prep::Original),
            "clahe" => Ok(Prep::Clahe),
            "complement" => Ok(Prep::Complement),
            "three-channel" | "3-channel" | "3channel" => Ok(Prep::ThreeChannel),
            _ => Err(Error::Unknown {
                kind: "preprocessing",
                name: s.to_string(),
            }),
        }
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
}

fn unknown_key(key: &str) -> Error {
    Error::Unknown {
        kind: "config key",
        name: key.to_string(),
    }
}

/// One classification experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub prep: Prep,
    /// `in_channels` follows `prep`; `n_classes` is 3.
    pub classifier: ClassifierConfig,
    /// Side of the square network input.
    pub input_size: usize,
    pub folds: usize,
    pub train: TrainConfig,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Plain,
            prep: Prep::Original,
            classifier: ClassifierConfig::default(),
            input_size: 64,
            folds: 5,
            train: TrainConfig::classification(),
        }
    }
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classifier.in_channels != self.prep.channels() {
            return Err(Error::invalid(format!(
                "{} preprocessing needs {} input channels, classifier has {}",
                self.prep.name(),
                self.prep.channels(),
                self.classifier.in_channels
            )));
        }
        if self.classifier.n_classes != 3 {
            return Err(Error::invalid("the classifier must have 3 outputs"));
        }
        if self.input_size < 16 {
            return Err(Error::invalid(format!("input size {} below 16", self.input_size)));
        }
        if self.folds < 2 {
            return Err(Error::invalid(format!("need at least 2 folds, got {}", self.folds)));
        }
        self.classifier.validate()?;
        self.train.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "scheme" => self.scheme = value.parse()?,
            "prep" | "preprocessing" => {
                self.prep = value.parse()?;
                self.classifier.in_channels = self.prep.channels();
            }
            "input_size" => self.input_size = parse_num(key, value)?,
            "folds" => self.folds = parse_num(key, value)?,
            "family" | "width" | "blocks" => self.classifier.set(key, value.trim())?,
            _ => {
                if !self.train.set(key, value)? {
                    return Err(unknown_key(key));
                }
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("scheme".to_string(), self.scheme.name().to_string()),
            ("prep".to_string(), self.prep.name().to_string()),
            ("family".to_string(), self.classifier.family.name().to_string()),
            ("width".to_string(), self.classifier.width.to_string()),
            ("blocks".to_string(), self.classifier.blocks.to_string()),
            ("input_size".to_string(), self.input_size.to_string()),
            ("folds".to_string(), self.folds.to_string()),
        ];
        kv.extend(self.train.to_kv());
        kv
    }

    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One segmentation run.
#[derive(Clone, Debug, PartialEq)]
pub struct SegConfig {
    pub unet: UNetConfig,
    pub input_size: usize,
    /// Share of the images held out for validation.
    pub val_fraction: f64,
    pub train: TrainConfig,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            input_size: 64,
            val_fraction: 0.2,
            train: TrainConfig::segmentation(),
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        let step = 1usize << self.unet.depth;
        if self.input_size == 0 || self.input_size % step != 0 {
            return Err(Error::invalid(format!(
                "input size {} not divisible by {step}",
                self.input_size
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid(format!("validation fraction {}", self.val_fraction)));
        }
        self.train.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "base_channels" | "depth" => self.unet.set(key, value.trim())?,
            "input_size" => self.input_size = parse_num(key, value)?,
            "val_fraction" => self.val_fraction = parse_num(key, value)?,
            _ => {
                if !self.train.set(key, value)? {
                    return Err(unknown_key(key));
                }
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![
            ("base_channels".to_string(), self.unet.base_channels.to_string()),
            ("depth".to_string(), self.unet.depth.to_string()),
            ("input_size".to_string(), self.input_size.to_string()),
            ("val_fraction".to_string(), self.val_fraction.to_string()),
        ];
        kv.extend(self.train.to_kv());
        kv
    }

    pub fn from_kv(pairs: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses flat `key=value` text. Blank lines and lines starting with `#`
/// are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::format(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn render_kv(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn read_kv(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text)
}
