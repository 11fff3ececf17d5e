//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected so typos fail loudly. Command-line flags are applied after the
//! file through the same [`RunConfig::set`] entry point, so flags win.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use sentimix::model::ModelConfig;
use sentimix::textnorm::NormConfig;
use sentimix::train::{ScheduleConfig, TrainConfig};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue { key: String, value: String, reason: String },
}

/// One training phase: loop settings plus its learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub train: TrainConfig,
    pub sched: ScheduleConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub vocab: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub synth_tweets: usize,
    pub synth_valid_fraction: f64,
    pub norm: NormConfig,
    pub vocab_target: usize,
    pub vocab_min_freq: usize,
    /// `vocab_size` is filled in from the vocabulary at run time.
    pub model: ModelConfig,
    pub pretrain: Phase,
    pub finetune: Phase,
    pub preprocessing: bool,
    pub ulmfit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig { n_layers: 2, hidden: 64, n_heads: 4, ff_dim: 128, ..ModelConfig::default() };
        RunConfig {
            train: "data/train.conllu".into(),
            valid: "data/valid.conllu".into(),
            test: "data/valid.conllu".into(),
            vocab: None,
            checkpoint: None,
            predictions: None,
            out: "out".into(),
            seed: 0,
            seeds: vec![0, 1, 2],
            synth_tweets: 2000,
            synth_valid_fraction: 0.2,
            norm: NormConfig::default(),
            vocab_target: 1000,
            vocab_min_freq: 2,
            model,
            pretrain: Phase {
                train: TrainConfig { epochs: 40, ..TrainConfig::default() },
                sched: ScheduleConfig::new(1e-3, 1),
            },
            finetune: Phase {
                train: TrainConfig { epochs: 3, ..TrainConfig::default() },
                sched: ScheduleConfig::new(1e-2, 1),
            },
            preprocessing: true,
            ulmfit: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue { key: key.into(), value: value.into(), reason: "expected a boolean".into() }),
    }
}

fn set_phase(phase: &mut Phase, key: &str, full_key: &str, value: &str) -> Result<bool, ConfigError> {
    let (t, s) = (&mut phase.train, &mut phase.sched);
    match key {
        "epochs" => t.epochs = parse(full_key, value)?,
        "batch_size" => t.batch_size = parse(full_key, value)?,
        "weight_decay" => t.weight_decay = parse(full_key, value)?,
        "mask_rate" => t.mask_rate = parse(full_key, value)?,
        "max_steps" => t.max_steps = if value == "none" { None } else { Some(parse(full_key, value)?) },
        "adam_beta1" => t.adam.beta1 = parse(full_key, value)?,
        "adam_beta2" => t.adam.beta2 = parse(full_key, value)?,
        "adam_eps" => t.adam.eps = parse(full_key, value)?,
        "lr_max" => s.lr_max = parse(full_key, value)?,
        "cut_frac" => s.cut_frac = parse(full_key, value)?,
        "ratio" => s.ratio = parse(full_key, value)?,
        "discr_factor" => s.discr_factor = parse(full_key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let path = || PathBuf::from(value);
        match key {
            "train" => self.train = path(),
            "valid" => self.valid = path(),
            "test" => self.test = path(),
            "vocab" => self.vocab = Some(path()),
            "checkpoint" => self.checkpoint = Some(path()),
            "predictions" => self.predictions = Some(path()),
            "out" => self.out = path(),
            "seed" => self.seed = parse(key, value)?,
            "seeds" => {
                self.seeds = value.split(',').map(|s| parse(key, s.trim())).collect::<Result<_, _>>()?;
                if self.seeds.is_empty() {
                    return Err(ConfigError::BadValue { key: key.into(), value: value.into(), reason: "no seeds".into() });
                }
            }
            "synth.tweets" => self.synth_tweets = parse(key, value)?,
            "synth.valid_fraction" => self.synth_valid_fraction = parse(key, value)?,
            "norm.collapse_min_run" => {
                self.norm.collapse_min_run = if value == "off" { usize::MAX } else { parse(key, value)? }
            }
            "norm.remove_mentions" => self.norm.remove_mentions = parse_bool(key, value)?,
            "norm.remove_hashtags" => self.norm.remove_hashtags = parse_bool(key, value)?,
            "norm.strip_marks" => self.norm.strip_marks = parse_bool(key, value)?,
            "vocab.target_size" => self.vocab_target = parse(key, value)?,
            "vocab.min_freq" => self.vocab_min_freq = parse(key, value)?,
            "model.n_layers" => self.model.n_layers = parse(key, value)?,
            "model.hidden" => self.model.hidden = parse(key, value)?,
            "model.n_heads" => self.model.n_heads = parse(key, value)?,
            "model.ff_dim" => self.model.ff_dim = parse(key, value)?,
            "model.dropout" => self.model.dropout = parse(key, value)?,
            "max_len" => {
                let n = parse(key, value)?;
                self.model.max_len = n;
                self.pretrain.train.max_len = n;
                self.finetune.train.max_len = n;
            }
            "ablation.preprocessing" => self.preprocessing = parse_bool(key, value)?,
            "ablation.ulmfit" => self.ulmfit = parse_bool(key, value)?,
            _ => {
                let handled = match key.split_once('.') {
                    Some(("pretrain", k)) => set_phase(&mut self.pretrain, k, key, value)?,
                    Some(("finetune", k)) => set_phase(&mut self.finetune, k, key, value)?,
                    _ => false,
                };
                if !handled {
                    return Err(ConfigError::UnknownKey(key.into()));
                }
            }
        }
        Ok(())
    }

    /// Parses an override of the form `key=value`.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair.split_once('=').ok_or_else(|| ConfigError::Syntax { line: 0, text: pair.to_string() })?;
        self.set(k.trim(), v.trim())
    }

    pub fn norm(&self) -> Option<&NormConfig> {
        self.preprocessing.then_some(&self.norm)
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.vocab.clone().unwrap_or_else(|| self.out.join("vocab.txt"))
    }

    /// Checkpoint read by `finetune`; defaults to the one `pretrain` writes.
    pub fn pretrained_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("pretrained.ckpt"))
    }

    /// Checkpoint read by `predict`; defaults to the one `finetune` writes.
    pub fn finetuned_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out.join("finetuned.ckpt"))
    }

    pub fn predictions_path(&self) -> PathBuf {
        self.predictions.clone().unwrap_or_else(|| self.out.join("predictions.csv"))
    }

    pub fn finetune_phase(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.finetune.train.clone() }.with_ulmfit(self.ulmfit)
    }

    pub fn pretrain_phase(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.pretrain.train.clone() }
    }
}

pub fn load(path: &Path) -> Result<RunConfig, crate::CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::CliError::input(path, e))?;
    RunConfig::from_text(&text).map_err(|e| crate::CliError::input(path, e))
}
