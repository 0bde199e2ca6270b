//! Flat `key = value` run configuration.
//!
//! One setting per line. `#` starts a comment, blank lines are ignored,
//! and keys are case-sensitive. Later lines override earlier ones, and
//! command-line overrides are applied on top of the file.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::Format;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "CDNPG_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    /// Inferred from the file extension when unset.
    pub format: Option<Format>,
    /// Share of the training file held out for validation when no
    /// validation file is given.
    pub valid_fraction: f64,
    pub vocab_max_size: Option<usize>,
    pub min_freq: usize,
    pub wordpiece_vocab: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_path: None,
            valid_path: None,
            format: None,
            valid_fraction: 0.0,
            vocab_max_size: None,
            min_freq: 1,
            wordpiece_vocab: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output_dir: Option<PathBuf>,
}

pub const KEYS: &[&str] = &[
    "layers",
    "hidden",
    "heads",
    "ffn_dim",
    "max_len",
    "dropout",
    "mask_mode",
    "epsilon",
    "renormalize",
    "attention",
    "batch_size",
    "max_steps",
    "warmup_steps",
    "peak_lr",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "seed",
    "validation_interval",
    "patience",
    "train_path",
    "valid_path",
    "format",
    "valid_fraction",
    "vocab_max_size",
    "min_freq",
    "wordpiece_vocab",
    "output_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "cannot parse {value:?} for key {key} as a boolean"
        ))),
    }
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (m, t, d) = (&mut self.model, &mut self.train, &mut self.data);
        match key.trim() {
            "layers" => m.layers = parse(key, v)?,
            "hidden" => m.hidden = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "ffn_dim" => m.ffn_dim = parse(key, v)?,
            "max_len" => m.max_len = parse(key, v)?,
            "dropout" => m.dropout = parse(key, v)?,
            "mask_mode" => m.mask_mode = v.parse()?,
            "epsilon" => m.epsilon = parse(key, v)?,
            "renormalize" => m.renormalize = parse_bool(key, v)?,
            "attention" => {
                m.attention = serde_json::from_value(serde_json::Value::String(v.to_string()))
                    .map_err(|_| Error::Config(format!("attention must be granularity_aware or vanilla, got {v:?}")))?
            }
            "batch_size" => t.batch_size = parse(key, v)?,
            "max_steps" => t.max_steps = parse(key, v)?,
            "warmup_steps" => t.warmup_steps = parse(key, v)?,
            "peak_lr" => t.peak_lr = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "validation_interval" => t.validation_interval = parse(key, v)?,
            "patience" => t.patience = parse(key, v)?,
            "train_path" => d.train_path = optional(key, v)?,
            "valid_path" => d.valid_path = optional(key, v)?,
            "format" => d.format = optional(key, v)?,
            "valid_fraction" => d.valid_fraction = parse(key, v)?,
            "vocab_max_size" => d.vocab_max_size = optional(key, v)?,
            "min_freq" => d.min_freq = parse(key, v)?,
            "wordpiece_vocab" => d.wordpiece_vocab = optional(key, v)?,
            "output_dir" => self.output_dir = optional(key, v)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key {other:?}; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies every setting in `text`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1)))?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    /// Applies `key=value` overrides, as given on the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Serializes every key in the file grammar.
    pub fn to_text(&self) -> String {
        let (m, t, d) = (&self.model, &self.train, &self.data);
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let opt = |x: Option<usize>| x.map_or("none".to_string(), |x| x.to_string());
        let attention = serde_json::to_value(m.attention)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        let values: Vec<(&str, String)> = vec![
            ("layers", m.layers.to_string()),
            ("hidden", m.hidden.to_string()),
            ("heads", m.heads.to_string()),
            ("ffn_dim", m.ffn_dim.to_string()),
            ("max_len", m.max_len.to_string()),
            ("dropout", m.dropout.to_string()),
            ("mask_mode", m.mask_mode.to_string()),
            ("epsilon", m.epsilon.to_string()),
            ("renormalize", m.renormalize.to_string()),
            ("attention", attention),
            ("batch_size", t.batch_size.to_string()),
            ("max_steps", t.max_steps.to_string()),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("peak_lr", t.peak_lr.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("seed", t.seed.to_string()),
            ("validation_interval", t.validation_interval.to_string()),
            ("patience", t.patience.to_string()),
            ("train_path", path(&d.train_path)),
            ("valid_path", path(&d.valid_path)),
            ("format", d.format.map_or("none".to_string(), |f| f.to_string())),
            ("valid_fraction", d.valid_fraction.to_string()),
            ("vocab_max_size", opt(d.vocab_max_size)),
            ("min_freq", d.min_freq.to_string()),
            ("wordpiece_vocab", path(&d.wordpiece_vocab)),
            ("output_dir", path(&self.output_dir)),
        ];
        values.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Output directory: `override_dir`, then the environment, then the
    /// file setting, then `runs/latest`.
    pub fn resolve_output_dir(&self, override_dir: Option<&Path>) -> PathBuf {
        override_dir
            .map(Path::to_path_buf)
            .or_else(|| {
                std::env::var_os(OUTPUT_DIR_ENV)
                    .filter(|v| !v.is_empty())
                    .map(PathBuf::from)
            })
            .or_else(|| self.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs/latest"))
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(msg) => msg.clone(),
        other => other.to_string(),
    }
}
