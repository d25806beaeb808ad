//! Flat `key=value` experiment configuration with `model.`, `train.` and
//! `data.` prefixes. Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{NoiseMode, TrainConfig};

/// How `train.noise_sigma` is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseScale {
    /// Velocity units (m/s).
    Absolute,
    /// Fraction of the standard deviation of the training snapshots.
    Relative,
}

impl std::fmt::Display for NoiseScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseScale::Absolute => "absolute",
            NoiseScale::Relative => "relative",
        })
    }
}

impl FromStr for NoiseScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(NoiseScale::Absolute),
            "relative" => Ok(NoiseScale::Relative),
            other => Err(Error::Config(format!("unknown noise scale `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Training scenarios, by catalog name (or file stem when `dir` is set).
    pub scenarios: Vec<String>,
    /// Scenarios evaluated by rollout after training.
    pub eval_scenarios: Vec<String>,
    /// Directory of `<name>.mesh` / `<name>.series` files; generated on the fly when `None`.
    pub dir: Option<PathBuf>,
    /// Length of generated series.
    pub snapshots: usize,
    /// Snapshots `0..train_snapshots` form the training range.
    pub train_snapshots: usize,
    /// Rollout horizon of the evaluation, starting right after the training range.
    pub horizon: usize,
    /// Keep only training nodes with `x < truncate_x` (transductive setting).
    pub truncate_x: Option<f64>,
    pub noise_scale: NoiseScale,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scenarios: vec!["baseline".into()],
            eval_scenarios: vec!["baseline".into()],
            dir: None,
            snapshots: 400,
            train_snapshots: 150,
            horizon: 100,
            truncate_x: None,
            noise_scale: NoiseScale::Absolute,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_optional_f64(key: &str, value: &str) -> Result<Option<f64>> {
    if value == "none" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn join_usize(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn optional_f64(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |r| r.to_string())
}

/// Applies a `model.` key (without the prefix). `window` sets the first encoder width.
pub fn set_model_key(m: &mut ModelConfig, key: &str, value: &str) -> Result<()> {
    let full = format!("model.{key}");
    match key {
        "operator" => m.operator = value.parse()?,
        "kernels" => m.kernels = parse_value(&full, value)?,
        "window" => m.encoder_channels[0] = parse_value(&full, value)?,
        "channels" => {
            let mut ch = vec![m.encoder_channels[0]];
            for item in parse_list(value) {
                ch.push(parse_value(&full, &item)?);
            }
            m.encoder_channels = ch;
        }
        "pooling_ratio" => m.pooling_ratio = parse_optional_f64(&full, value)?,
        "norm" => m.norm = value.parse()?,
        "seed" => m.seed = parse_value(&full, value)?,
        "length_scale" => {
            m.length_scale = if value == "auto" { None } else { Some(parse_value(&full, value)?) }
        }
        "gmm_self_loops" => m.gmm_self_loops = parse_bool(&full, value)?,
        "gmm_root_weight" => m.gmm_root_weight = parse_bool(&full, value)?,
        "gate" => m.gate = value.parse()?,
        "power2_adjacency" => m.power2_adjacency = parse_bool(&full, value)?,
        "bias" => m.bias = parse_bool(&full, value)?,
        _ => return Err(Error::Config(format!("unknown key `{full}`"))),
    }
    Ok(())
}

/// `model.` lines, window included.
pub fn model_config_text(m: &ModelConfig) -> String {
    let mut s = String::new();
    writeln!(s, "model.window={}", m.window()).unwrap();
    write_model_keys(&mut s, m);
    s
}

fn write_model_keys(s: &mut String, m: &ModelConfig) {
    writeln!(s, "model.operator={}", m.operator).unwrap();
    writeln!(s, "model.kernels={}", m.kernels).unwrap();
    writeln!(s, "model.channels={}", join_usize(&m.encoder_channels[1..])).unwrap();
    writeln!(s, "model.pooling_ratio={}", optional_f64(m.pooling_ratio)).unwrap();
    writeln!(s, "model.norm={}", m.norm).unwrap();
    writeln!(s, "model.seed={}", m.seed).unwrap();
    let ls = m.length_scale.map_or_else(|| "auto".to_string(), |l| l.to_string());
    writeln!(s, "model.length_scale={ls}").unwrap();
    writeln!(s, "model.gmm_self_loops={}", m.gmm_self_loops).unwrap();
    writeln!(s, "model.gmm_root_weight={}", m.gmm_root_weight).unwrap();
    writeln!(s, "model.gate={}", m.gate).unwrap();
    writeln!(s, "model.power2_adjacency={}", m.power2_adjacency).unwrap();
    writeln!(s, "model.bias={}", m.bias).unwrap();
}

/// Splits `key=value`, trimming both sides.
pub fn split_assignment(line: &str) -> Result<(&str, &str)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
    Ok((k.trim(), v.trim()))
}

impl ExperimentConfig {
    /// Applies one fully qualified key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, name) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("key `{key}` lacks a section prefix")))?;
        match section {
            "model" => set_model_key(&mut self.model, name, value),
            "train" => self.set_train(name, value),
            "data" => self.set_data(name, value),
            _ => Err(Error::Config(format!("unknown section in `{key}`"))),
        }
    }

    fn set_train(&mut self, name: &str, value: &str) -> Result<()> {
        let key = format!("train.{name}");
        let t = &mut self.train;
        match name {
            "window" => self.model.encoder_channels[0] = parse_value(&key, value)?,
            "epochs" => t.epochs = parse_value(&key, value)?,
            "lr0" => t.lr0 = parse_value(&key, value)?,
            "lr_factor" => t.lr_factor = parse_value(&key, value)?,
            "lr_patience" => t.lr_patience = parse_value(&key, value)?,
            "lr_min" => t.lr_min = parse_value(&key, value)?,
            "noise" => t.noise = value.parse::<NoiseMode>()?,
            "noise_sigma" => t.noise_sigma = parse_value(&key, value)?,
            "early_stop_patience" => t.early_stop_patience = parse_value(&key, value)?,
            "seed" => t.seed = parse_value(&key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn set_data(&mut self, name: &str, value: &str) -> Result<()> {
        let key = format!("data.{name}");
        let d = &mut self.data;
        match name {
            "scenarios" => d.scenarios = parse_list(value),
            "eval_scenarios" => d.eval_scenarios = parse_list(value),
            "dir" => d.dir = (!value.is_empty() && value != "none").then(|| PathBuf::from(value)),
            "snapshots" => d.snapshots = parse_value(&key, value)?,
            "train_snapshots" => d.train_snapshots = parse_value(&key, value)?,
            "horizon" => d.horizon = parse_value(&key, value)?,
            "truncate_x" => d.truncate_x = parse_optional_f64(&key, value)?,
            "noise_scale" => d.noise_scale = value.parse()?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults. Errors carry 1-based line numbers.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let result = split_assignment(line).and_then(|(k, v)| cfg.set(k, v));
            if let Err(e) = result {
                return Err(Error::parse(i + 1, e.to_string()));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = split_assignment(o.as_ref())?;
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if d.scenarios.is_empty() {
            return Err(Error::Config("data.scenarios is empty".into()));
        }
        if d.train_snapshots < self.model.window() + 1 {
            return Err(Error::Config(format!(
                "data.train_snapshots={} is too short for a window of {}",
                d.train_snapshots,
                self.model.window()
            )));
        }
        if d.dir.is_none() && d.snapshots < d.train_snapshots {
            return Err(Error::Config("data.snapshots must be >= data.train_snapshots".into()));
        }
        if d.horizon == 0 {
            return Err(Error::Config("data.horizon must be at least 1".into()));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        write_model_keys(&mut s, &self.model);
        let t = &self.train;
        writeln!(s, "train.window={}", self.model.window()).unwrap();
        writeln!(s, "train.epochs={}", t.epochs).unwrap();
        writeln!(s, "train.lr0={}", t.lr0).unwrap();
        writeln!(s, "train.lr_factor={}", t.lr_factor).unwrap();
        writeln!(s, "train.lr_patience={}", t.lr_patience).unwrap();
        writeln!(s, "train.lr_min={}", t.lr_min).unwrap();
        writeln!(s, "train.noise={}", t.noise).unwrap();
        writeln!(s, "train.noise_sigma={}", t.noise_sigma).unwrap();
        writeln!(s, "train.early_stop_patience={}", t.early_stop_patience).unwrap();
        writeln!(s, "train.seed={}", t.seed).unwrap();
        let d = &self.data;
        writeln!(s, "data.scenarios={}", d.scenarios.join(",")).unwrap();
        writeln!(s, "data.eval_scenarios={}", d.eval_scenarios.join(",")).unwrap();
        writeln!(
            s,
            "data.dir={}",
            d.dir.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
        )
        .unwrap();
        writeln!(s, "data.snapshots={}", d.snapshots).unwrap();
        writeln!(s, "data.train_snapshots={}", d.train_snapshots).unwrap();
        writeln!(s, "data.horizon={}", d.horizon).unwrap();
        writeln!(s, "data.truncate_x={}", optional_f64(d.truncate_x)).unwrap();
        writeln!(s, "data.noise_scale={}", d.noise_scale).unwrap();
        s
    }
}
