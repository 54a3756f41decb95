//! `key=value` run configuration files.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored and
//! unknown keys are errors. Command-line flags are applied after the file, so
//! the precedence is flag > file > default.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Every recognized key with a short description. Defaults come from
/// [`RunConfig::default`].
pub const KEYS: &[(&str, &str)] = &[
    ("model.mode", "head: fusion, hr or cgr"),
    ("data.size", "input size, `64` or `HxW`"),
    ("cascade.w", "pyramid levels W"),
    ("model.channels", "encoder widths per level, comma separated"),
    ("graph.c", "node embedding channels"),
    ("graph.n", "scales per modality"),
    ("graph.t", "message-passing iterations"),
    ("model.seed", "initialization seed"),
    ("train.steps", "optimizer steps"),
    ("train.batch", "samples per step"),
    ("train.lr", "base learning rate"),
    ("train.poly_power", "exponent of the poly schedule"),
    ("train.weight_decay", "L2 coefficient"),
    ("train.seed", "batch order and augmentation seed"),
    ("train.flip", "random horizontal flips"),
    ("train.rotate", "random quarter turns"),
    ("train.brightness", "random brightness scaling"),
    ("train.deterministic", "reproducible training (always on)"),
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? || self.train.set(key, value)? {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key `{key}`")))
        }
    }

    /// Applies the settings in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("{}:{}: {msg}", origin.display(), i + 1));
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key=value, got `{line}`")))?;
            self.set(k.trim(), v.trim()).map_err(|e| at(e.to_string()))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut pairs = self.model.to_pairs();
        pairs.extend(self.train.to_pairs());
        pairs
    }

    /// Renders the configuration in file syntax.
    pub fn render(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}
