//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, blank lines are ignored.
//! Every key is optional and falls back to the library default. Unknown
//! keys, repeated keys and unparsable values are errors that carry the
//! line number.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use stgc::model::{CelKind, ModelConfig};
use stgc::synthdata::SynthSpec;
use stgc::train::{OptimizerKind, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    /// Trailing fraction of the dataset held out for validation.
    pub val_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            val_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: PathBuf,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{l}: {}", self.path.display(), self.message),
            None => write!(f, "{}: {}", self.path.display(), self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Every recognised key, in documentation order.
pub const KEYS: &[&str] = &[
    "input_dim",
    "hidden_size",
    "intermediate_size",
    "num_experts",
    "top_k",
    "num_layers",
    "num_classes",
    "tau",
    "alpha",
    "beta",
    "cel_kind",
    "cel_literal_sign",
    "capacity_factor",
    "bpr",
    "steps",
    "batch_size",
    "lr",
    "optimizer",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "cosine_decay",
    "seed",
    "stgc",
    "verify_mode",
    "grad_accum",
    "consistency_stride",
    "pool_accum",
    "include_diagonal",
    "per_layer_consistency",
    "eval_every",
    "eval_batch",
    "train_capacity",
    "timing",
    "num_tasks",
    "clusters_per_task",
    "samples",
    "confusion_pairs",
    "noise_sigma",
    "task_signal",
    "data_seed",
    "val_fraction",
];

pub fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        other => Err(format!(
            "expected a boolean (true/false/on/off), got '{other}'"
        )),
    }
}

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse::<T>()
        .map_err(|_| format!("cannot parse '{v}' as {}", std::any::type_name::<T>()))
}

/// `"0-1, 2-3"`; an empty value means no pairs.
pub fn parse_pairs(v: &str) -> Result<Vec<(usize, usize)>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|p| {
            let (a, b) = p
                .split_once('-')
                .ok_or_else(|| format!("confusion pair '{p}' must look like a-b"))?;
            Ok((num(a.trim())?, num(b.trim())?))
        })
        .collect()
}

pub fn parse_capacity(v: &str) -> Result<Option<f64>, String> {
    match v {
        "none" | "unlimited" | "inf" => Ok(None),
        other => num::<f64>(other).map(Some),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            path: path.to_path_buf(),
            line: None,
            message: format!("cannot read config: {e}"),
        })?;
        RunConfig::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<RunConfig, ConfigError> {
        let err = |line: Option<usize>, message: String| ConfigError {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut cfg = RunConfig::default();
        let mut seen: Vec<(&str, usize)> = Vec::new();
        let (mut b1, mut b2, mut eps) = (0.9, 0.999, 1e-8);
        let mut optimizer = "adam".to_string();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(Some(lineno), format!("expected key = value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let known = KEYS
                .iter()
                .find(|k| **k == key)
                .ok_or_else(|| err(Some(lineno), format!("unknown key '{key}'")))?;
            if let Some((_, first)) = seen.iter().find(|(k, _)| k == known) {
                return Err(err(
                    Some(lineno),
                    format!("key '{key}' already set on line {first}"),
                ));
            }
            seen.push((known, lineno));
            let (m, t, s) = (&mut cfg.model, &mut cfg.train, &mut cfg.synth);
            let r: Result<(), String> = (|| {
                match key {
                    "input_dim" => {
                        m.input_dim = num(value)?;
                        s.input_dim = m.input_dim;
                    }
                    "hidden_size" => m.hidden_size = num(value)?,
                    "intermediate_size" => m.intermediate_size = num(value)?,
                    "num_experts" => m.num_experts = num(value)?,
                    "top_k" => m.top_k = num(value)?,
                    "num_layers" => m.num_layers = num(value)?,
                    "num_classes" => {
                        m.num_classes = num(value)?;
                        s.num_classes = m.num_classes;
                    }
                    "tau" => m.tau = num(value)?,
                    "alpha" => m.alpha = num(value)?,
                    "beta" => m.beta = num(value)?,
                    "cel_kind" => {
                        m.cel_kind = CelKind::from_str(value).map_err(|e| e.to_string())?
                    }
                    "cel_literal_sign" => m.cel_literal_sign = parse_bool(value)?,
                    "capacity_factor" => m.capacity_factor = parse_capacity(value)?,
                    "bpr" => m.bpr = parse_bool(value)?,
                    "steps" => t.steps = num(value)?,
                    "batch_size" => t.batch_size = num(value)?,
                    "lr" => t.lr = num(value)?,
                    "optimizer" => {
                        OptimizerKind::from_str(value).map_err(|e| e.to_string())?;
                        optimizer = value.to_string();
                    }
                    "adam_beta1" => b1 = num(value)?,
                    "adam_beta2" => b2 = num(value)?,
                    "adam_eps" => eps = num(value)?,
                    "cosine_decay" => t.cosine_decay = parse_bool(value)?,
                    "seed" => t.seed = num(value)?,
                    "stgc" => t.stgc_enabled = parse_bool(value)?,
                    "verify_mode" => t.verify_mode = parse_bool(value)?,
                    "grad_accum" => t.grad_accum = num(value)?,
                    "consistency_stride" => t.consistency_stride = num(value)?,
                    "pool_accum" => t.pool_accum = parse_bool(value)?,
                    "include_diagonal" => t.include_diagonal = parse_bool(value)?,
                    "per_layer_consistency" => t.per_layer_consistency = parse_bool(value)?,
                    "eval_every" => t.eval_every = num(value)?,
                    "eval_batch" => t.eval_batch = num(value)?,
                    "train_capacity" => t.train_capacity = parse_bool(value)?,
                    "timing" => t.timing = parse_bool(value)?,
                    "num_tasks" => s.num_tasks = num(value)?,
                    "clusters_per_task" => s.clusters_per_task = num(value)?,
                    "samples" => s.samples = num(value)?,
                    "confusion_pairs" => s.confusion_pairs = parse_pairs(value)?,
                    "noise_sigma" => s.noise_sigma = num(value)?,
                    "task_signal" => s.task_signal = num(value)?,
                    "data_seed" => s.seed = num(value)?,
                    "val_fraction" => cfg.val_fraction = num(value)?,
                    _ => unreachable!("key list and match arms disagree"),
                }
                Ok(())
            })();
            r.map_err(|m| err(Some(lineno), format!("{key}: {m}")))?;
        }
        cfg.train.optimizer = match optimizer.as_str() {
            "sgd" => OptimizerKind::Sgd,
            _ => OptimizerKind::Adam {
                beta1: b1,
                beta2: b2,
                eps,
            },
        };
        cfg.validate().map_err(|m| err(None, m))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        self.synth.validate().map_err(|e| e.to_string())?;
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(format!(
                "val_fraction must be in [0, 1), got {}",
                self.val_fraction
            ));
        }
        Ok(())
    }

    /// The config as parseable text, one key per line.
    pub fn to_text(&self) -> String {
        let (m, t, s) = (&self.model, &self.train, &self.synth);
        let (opt, b1, b2, eps) = match t.optimizer {
            OptimizerKind::Sgd => ("sgd", 0.9, 0.999, 1e-8),
            OptimizerKind::Adam { beta1, beta2, eps } => ("adam", beta1, beta2, eps),
        };
        let cel = match m.cel_kind {
            CelKind::CeLike => "ce_like",
            CelKind::MseLike => "mse_like",
        };
        let cap = m
            .capacity_factor
            .map_or("none".to_string(), |c| c.to_string());
        let pairs: Vec<String> = s
            .confusion_pairs
            .iter()
            .map(|(a, b)| format!("{a}-{b}"))
            .collect();
        let values: Vec<String> = vec![
            m.input_dim.to_string(),
            m.hidden_size.to_string(),
            m.intermediate_size.to_string(),
            m.num_experts.to_string(),
            m.top_k.to_string(),
            m.num_layers.to_string(),
            m.num_classes.to_string(),
            m.tau.to_string(),
            m.alpha.to_string(),
            m.beta.to_string(),
            cel.to_string(),
            m.cel_literal_sign.to_string(),
            cap,
            m.bpr.to_string(),
            t.steps.to_string(),
            t.batch_size.to_string(),
            t.lr.to_string(),
            opt.to_string(),
            b1.to_string(),
            b2.to_string(),
            eps.to_string(),
            t.cosine_decay.to_string(),
            t.seed.to_string(),
            t.stgc_enabled.to_string(),
            t.verify_mode.to_string(),
            t.grad_accum.to_string(),
            t.consistency_stride.to_string(),
            t.pool_accum.to_string(),
            t.include_diagonal.to_string(),
            t.per_layer_consistency.to_string(),
            t.eval_every.to_string(),
            t.eval_batch.to_string(),
            t.train_capacity.to_string(),
            t.timing.to_string(),
            s.num_tasks.to_string(),
            s.clusters_per_task.to_string(),
            s.samples.to_string(),
            pairs.join(","),
            s.noise_sigma.to_string(),
            s.task_signal.to_string(),
            s.seed.to_string(),
            self.val_fraction.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
