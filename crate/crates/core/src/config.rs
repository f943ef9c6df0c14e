//! Plain-text `key = value` configuration.
//!
//! Blank lines and `#` comments are ignored. Model and training keys share
//! one namespace; later assignments win, so command-line overrides are
//! applied by calling [`RunConfig::set`] after loading the file.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::config(format!(
                "line {}: expected key = value, got {raw:?}",
                lineno + 1
            ))
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::config(format!("line {}: empty key", lineno + 1)));
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::config(format!("{key}: cannot parse {value:?}: {e}")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

impl ModelConfig {
    /// Returns `Ok(false)` if the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "size" => {
                self.height = parse(key, value)?;
                self.width = self.height;
            }
            "base_channels" => self.base_channels = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "n_levels_stft" => self.n_levels_stft = parse(key, value)?,
            "n_levels_stet" => self.n_levels_stet = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "window" => self.window = parse(key, value)?,
            "enable_stft" => self.enable_stft = parse_bool(key, value)?,
            "enable_stet" => self.enable_stet = parse_bool(key, value)?,
            "enable_ca" => self.enable_ca = parse_bool(key, value)?,
            "enable_gating" => self.enable_gating = parse_bool(key, value)?,
            "enable_tffn" => self.enable_tffn = parse_bool(key, value)?,
            "excess_kurtosis" => self.excess_kurtosis = parse_bool(key, value)?,
            "model_seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("depth", self.depth.to_string()),
            ("n_levels_stft", self.n_levels_stft.to_string()),
            ("n_levels_stet", self.n_levels_stet.to_string()),
            ("heads", self.heads.to_string()),
            ("window", self.window.to_string()),
            ("enable_stft", self.enable_stft.to_string()),
            ("enable_stet", self.enable_stet.to_string()),
            ("enable_ca", self.enable_ca.to_string()),
            ("enable_gating", self.enable_gating.to_string()),
            ("enable_tffn", self.enable_tffn.to_string()),
            ("excess_kurtosis", self.excess_kurtosis.to_string()),
            ("model_seed", self.seed.to_string()),
        ]
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = ModelConfig::toy();
        for (k, v) in pairs {
            if !cfg.set(k, v)? {
                return Err(Error::config(format!("unknown model key {k}")));
            }
        }
        Ok(cfg)
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "decay_factor" => self.decay_factor = parse(key, value)?,
            "decay_every_epochs" => self.decay_every_epochs = parse(key, value)?,
            "augment" => self.augment = parse_bool(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "val_fraction" => self.val_fraction = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "stop_at_dice" => {
                self.stop_at_dice = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("decay_factor", self.decay_factor.to_string()),
            ("decay_every_epochs", self.decay_every_epochs.to_string()),
            ("augment", self.augment.to_string()),
            ("seed", self.seed.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("threshold", self.threshold.to_string()),
            (
                "stop_at_dice",
                self.stop_at_dice.map_or("none".into(), |d| d.to_string()),
            ),
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().trim_start_matches("--").replace('-', "_");
        if self.model.set(&key, value)? || self.train.set(&key, value)? {
            Ok(())
        } else {
            Err(Error::config(format!("unknown configuration key {key}")))
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Serialized form; `RunConfig::parse` reads it back unchanged.
    pub fn to_text(&self) -> String {
        let mut out = String::from("[model]\n");
        for (k, v) in self.model.pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str("\n[train]\n");
        for (k, v) in self.train.pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comments_and_sections() {
        let pairs = parse_pairs("# top\n[model]\n depth = 4 # inline\n\nwindow=8\n").unwrap();
        assert_eq!(
            pairs,
            vec![("depth".into(), "4".into()), ("window".into(), "8".into())]
        );
    }

    #[test]
    fn missing_equals_is_error() {
        assert!(matches!(parse_pairs("depth 4"), Err(Error::Config(_))));
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("depth", "4").unwrap();
        cfg.set("--enable-stet", "false").unwrap();
        cfg.set("learning_rate", "0.0005").unwrap();
        cfg.set("stop_at_dice", "0.95").unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(
            RunConfig::parse("colour = red"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("depth = four"),
            Err(Error::Config(_))
        ));
    }
}
