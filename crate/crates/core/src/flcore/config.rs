//! Flat `key = value` configuration for the simulator.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected so typos do not silently fall back to defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::aggregation::Aggregator;
use crate::error::{Error, Result};
use crate::oram::OramConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetKind {
    /// Gaussian clusters generated from the seed.
    Synthetic,
    /// IDX image/label files (MNIST container).
    Idx,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// IDX image file for [`DatasetKind::Idx`].
    pub path: Option<PathBuf>,
    /// IDX label file; derived from `path` when absent.
    pub labels_path: Option<PathBuf>,
    pub classes: usize,
    pub separation: f32,
    pub labels_per_user: usize,
    pub samples_per_user: usize,
    /// Held-out records per class (test accuracy and attacker data).
    pub test_per_class: usize,
    /// Training pool records per class.
    pub train_per_class: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            path: None,
            labels_path: None,
            classes: 10,
            separation: 1.0,
            labels_per_user: 2,
            samples_per_user: 40,
            test_per_class: 100,
            train_per_class: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlConfig {
    /// Population size `N`.
    pub n_users: u32,
    /// Per-round sampling rate `q`.
    pub q: f64,
    /// Rounds `T`.
    pub rounds: u64,
    /// Sparse ratio; `k = ceil(alpha * d)`.
    pub alpha: f64,
    /// Noise multiplier; per-coordinate noise std is `sigma * clip`.
    pub sigma: f64,
    /// L2 clipping bound `C`.
    pub clip: f64,
    pub lr_client: f32,
    pub lr_server: f32,
    pub local_epochs: usize,
    /// Local minibatch size; 0 means the full shard.
    pub batch_size: usize,
    pub seed: u64,
    pub aggregator: Aggregator,
    pub model_input: usize,
    pub model_hidden: usize,
    pub dataset: DatasetConfig,
}

impl Default for FlConfig {
    fn default() -> Self {
        FlConfig {
            n_users: 100,
            q: 0.3,
            rounds: 3,
            alpha: 0.1,
            sigma: 1.12,
            clip: 1.0,
            lr_client: 0.5,
            lr_server: 1.0,
            local_epochs: 5,
            batch_size: 0,
            seed: 0,
            aggregator: Aggregator::Advanced,
            model_input: 32,
            model_hidden: 16,
            dataset: DatasetConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config { key: key.to_string(), message: format!("cannot parse `{value}`") })
}

impl FlConfig {
    pub fn classes(&self) -> usize {
        self.dataset.classes
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| Err(Error::Config { key: key.into(), message: message.into() });
        if !(self.q > 0.0 && self.q <= 1.0) {
            return bad("q", "must lie in (0, 1]");
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha", "must lie in (0, 1]");
        }
        if !(self.sigma >= 0.0) {
            return bad("sigma", "must be non-negative");
        }
        if !(self.clip > 0.0) {
            return bad("clip", "must be positive");
        }
        if self.n_users == 0 {
            return bad("n_users", "must be positive");
        }
        if self.model_input == 0 || self.model_hidden == 0 {
            return bad("model.hidden", "layer sizes must be positive");
        }
        if self.dataset.classes < 2 {
            return bad("dataset.classes", "need at least two classes");
        }
        if self.dataset.labels_per_user == 0 || self.dataset.labels_per_user > self.dataset.classes {
            return bad("dataset.labels_per_user", "must lie in 1..=classes");
        }
        if self.dataset.kind == DatasetKind::Idx && self.dataset.path.is_none() {
            return bad("dataset.path", "required for idx datasets");
        }
        match self.aggregator {
            Aggregator::Grouped { h: 0 } => return bad("group_h", "must be positive"),
            Aggregator::Baseline { cacheline_c: 0 } => return bad("cacheline_c", "must be positive"),
            _ => {}
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = FlConfig::default();
        let mut aggregator_name: Option<String> = None;
        let mut group_h: Option<usize> = None;
        let mut cacheline_c: Option<usize> = None;
        let mut oram = OramConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", lineno + 1),
                message: "expected `key = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "n_users" => cfg.n_users = parse_value(key, value)?,
                "q" => cfg.q = parse_value(key, value)?,
                "rounds" => cfg.rounds = parse_value(key, value)?,
                "alpha" => cfg.alpha = parse_value(key, value)?,
                "sigma" => cfg.sigma = parse_value(key, value)?,
                "clip" => cfg.clip = parse_value(key, value)?,
                "lr_client" => cfg.lr_client = parse_value(key, value)?,
                "lr_server" => cfg.lr_server = parse_value(key, value)?,
                "local_epochs" => cfg.local_epochs = parse_value(key, value)?,
                "batch_size" => cfg.batch_size = parse_value(key, value)?,
                "seed" => cfg.seed = parse_value(key, value)?,
                "aggregator" => aggregator_name = Some(value.to_string()),
                "group_h" => group_h = Some(parse_value(key, value)?),
                "cacheline_c" => cacheline_c = Some(parse_value(key, value)?),
                "oram.bucket_size" => oram.bucket_size = parse_value(key, value)?,
                "oram.stash_size" => oram.stash_size = parse_value(key, value)?,
                "model.input" => cfg.model_input = parse_value(key, value)?,
                "model.hidden" => cfg.model_hidden = parse_value(key, value)?,
                "dataset.kind" => {
                    cfg.dataset.kind = match value {
                        "synthetic" => DatasetKind::Synthetic,
                        "idx" | "mnist" => DatasetKind::Idx,
                        _ => {
                            return Err(Error::Config { key: key.into(), message: format!("unknown kind `{value}`") })
                        }
                    }
                }
                "dataset.path" => cfg.dataset.path = Some(PathBuf::from(value)),
                "dataset.labels_path" => cfg.dataset.labels_path = Some(PathBuf::from(value)),
                "dataset.classes" => cfg.dataset.classes = parse_value(key, value)?,
                "dataset.separation" => cfg.dataset.separation = parse_value(key, value)?,
                "dataset.labels_per_user" => cfg.dataset.labels_per_user = parse_value(key, value)?,
                "dataset.samples_per_user" => cfg.dataset.samples_per_user = parse_value(key, value)?,
                "dataset.test_per_class" => cfg.dataset.test_per_class = parse_value(key, value)?,
                "dataset.train_per_class" => cfg.dataset.train_per_class = parse_value(key, value)?,
                other => {
                    return Err(Error::Config { key: other.to_string(), message: "unknown key".into() });
                }
            }
        }
        if let Some(name) = aggregator_name {
            cfg.aggregator = match name.as_str() {
                "linear" => Aggregator::Linear,
                "advanced" => Aggregator::Advanced,
                "baseline" => Aggregator::Baseline { cacheline_c: cacheline_c.unwrap_or(1) },
                "grouped" => Aggregator::Grouped {
                    h: group_h.ok_or_else(|| Error::Config {
                        key: "group_h".into(),
                        message: "required when aggregator = grouped".into(),
                    })?,
                },
                "oram" => Aggregator::Oram { bucket_size: oram.bucket_size, stash_size: oram.stash_size },
                other => {
                    return Err(Error::Config { key: "aggregator".into(), message: format!("unknown aggregator `{other}`") })
                }
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Renders every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("n_users", self.n_users.to_string());
        kv("q", self.q.to_string());
        kv("rounds", self.rounds.to_string());
        kv("alpha", self.alpha.to_string());
        kv("sigma", self.sigma.to_string());
        kv("clip", self.clip.to_string());
        kv("lr_client", self.lr_client.to_string());
        kv("lr_server", self.lr_server.to_string());
        kv("local_epochs", self.local_epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("aggregator", self.aggregator.name().to_string());
        match self.aggregator {
            Aggregator::Grouped { h } => kv("group_h", h.to_string()),
            Aggregator::Baseline { cacheline_c } => kv("cacheline_c", cacheline_c.to_string()),
            Aggregator::Oram { bucket_size, stash_size } => {
                kv("oram.bucket_size", bucket_size.to_string());
                kv("oram.stash_size", stash_size.to_string());
            }
            _ => {}
        }
        kv("model.input", self.model_input.to_string());
        kv("model.hidden", self.model_hidden.to_string());
        let d = &self.dataset;
        kv("dataset.kind", if d.kind == DatasetKind::Idx { "idx" } else { "synthetic" }.to_string());
        if let Some(p) = &d.path {
            kv("dataset.path", p.display().to_string());
        }
        if let Some(p) = &d.labels_path {
            kv("dataset.labels_path", p.display().to_string());
        }
        kv("dataset.classes", d.classes.to_string());
        kv("dataset.separation", d.separation.to_string());
        kv("dataset.labels_per_user", d.labels_per_user.to_string());
        kv("dataset.samples_per_user", d.samples_per_user.to_string());
        kv("dataset.test_per_class", d.test_per_class.to_string());
        kv("dataset.train_per_class", d.train_per_class.to_string());
        s
    }
}
