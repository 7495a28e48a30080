//! Calibrator hyperparameters and the `key=value` config file format.

use std::path::Path;

use crate::calibrate::EntropySign;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Number of MLP layers (Q).
    pub layers: usize,
    pub hidden: usize,
    /// Weight of the entropy term.
    pub lambda: f64,
    /// Shrinkage coefficient applied to every trained parameter.
    pub alpha: f64,
    /// Ensemble size.
    pub n_e: usize,
    pub lr: f64,
    pub epochs: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub entropy_sign: EntropySign,
    pub bn_eps: f64,
    /// Add the prior logits to the network output. Off for the `-ID` ablation.
    pub identity: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            hidden: 16,
            lambda: 0.3,
            alpha: 0.9,
            n_e: 5,
            lr: 1e-2,
            epochs: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            entropy_sign: EntropySign::Minimize,
            bn_eps: 1e-5,
            identity: true,
        }
    }
}

pub const TRAIN_CONFIG_KEYS: &[&str] = &[
    "layers",
    "hidden",
    "lambda",
    "alpha",
    "n_e",
    "lr",
    "epochs",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "seed",
    "entropy_sign",
    "bn_eps",
    "identity",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    /// Alpha may be exactly zero: the calibrator then collapses onto the prior.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) {
            problems.push(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            problems.push(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.n_e == 0 {
            problems.push("n_e must be at least 1".to_owned());
        }
        if self.layers == 0 {
            problems.push("layers must be at least 1".to_owned());
        }
        if self.layers > 1 && self.hidden == 0 {
            problems.push("hidden must be at least 1".to_owned());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            problems.push(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            problems.push("adam betas must be in [0, 1)".to_owned());
        }
        let positive = |v: f64| v > 0.0;
        if !positive(self.adam_eps) || !positive(self.bn_eps) {
            problems.push("adam_eps and bn_eps must be positive".to_owned());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Sets one field by name. Returns `Ok(false)` for keys this config does
    /// not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "layers" => self.layers = parse_value(key, value)?,
            "hidden" => self.hidden = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "alpha" => self.alpha = parse_value(key, value)?,
            "n_e" => self.n_e = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse_value(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "entropy_sign" => self.entropy_sign = value.parse().map_err(Error::Config)?,
            "bn_eps" => self.bn_eps = parse_value(key, value)?,
            "identity" => self.identity = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// A parsed `key=value` line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigEntry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<ConfigEntry>> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::parse(
                path,
                idx + 1,
                format!("expected key=value, got {line:?}"),
            ));
        };
        entries.push(ConfigEntry {
            line: idx + 1,
            key: key.trim().to_owned(),
            value: value.trim().to_owned(),
        });
    }
    Ok(entries)
}

pub fn read_key_values(path: impl AsRef<Path>) -> Result<Vec<ConfigEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_key_values(&text, path)
}

/// Loads a config file containing only calibrator keys.
pub fn load_train_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let mut cfg = TrainConfig::default();
    for entry in read_key_values(path)? {
        if !cfg.apply(&entry.key, &entry.value)? {
            return Err(Error::parse(
                path,
                entry.line,
                format!("unknown key {:?}", entry.key),
            ));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.layers, c.hidden, c.n_e, c.epochs), (3, 16, 5, 50));
        assert_eq!((c.lambda, c.alpha, c.lr), (0.3, 0.9, 1e-2));
        c.validate().unwrap();
    }

    #[test]
    fn key_values_apply() {
        let text = "# tuned\nalpha = 0.8\n\nn_e=3\nentropy_sign=minimize\n";
        let mut cfg = TrainConfig::default();
        for e in parse_key_values(text, Path::new("c")).unwrap() {
            assert!(cfg.apply(&e.key, &e.value).unwrap());
        }
        assert_eq!(cfg.alpha, 0.8);
        assert_eq!(cfg.n_e, 3);
        assert_eq!(cfg.entropy_sign, EntropySign::Minimize);
    }

    #[test]
    fn bad_entries() {
        assert!(parse_key_values("alpha", Path::new("c")).is_err());
        let mut cfg = TrainConfig::default();
        assert!(!cfg.apply("colour", "red").unwrap());
        assert!(cfg.apply("alpha", "lots").is_err());
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
        cfg.alpha = 0.0;
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_key_in_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.cfg");
        std::fs::write(&path, "alpha=0.5\nbogus=1\n").unwrap();
        let err = load_train_config(&path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        std::fs::write(&path, "alpha=0.5\n").unwrap();
        assert_eq!(load_train_config(&path).unwrap().alpha, 0.5);
    }
}
