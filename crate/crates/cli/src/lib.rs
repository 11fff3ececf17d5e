//! Command implementations behind the `sentimix` binary.
//!
//! Every command reads its inputs from the [`RunConfig`] and writes its
//! outputs under `out`. Input problems (missing or malformed files, bad
//! checkpoints) surface as [`CliError::BadInput`] and exit with code 2;
//! anything else is internal and exits with code 1.

pub mod config;
pub mod pipeline;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sentimix::corpus::{generate_synthetic, Dataset, Sentiment, SynthConfig, Tweet};
use sentimix::eval::{self, EvalReport};
use sentimix::model::{load_checkpoint, save_checkpoint, HeadKind, Model};
use sentimix::tokenizer::Vocabulary;
use sentimix::train::{self, FinetuneOutcome, TrainHistory};
use thiserror::Error;

pub use config::RunConfig;
pub use pipeline::{AblationRow, ABLATION_ROWS};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    BadInput { path: PathBuf, message: String },
    #[error("bad input: {0}")]
    BadArgs(String),
    #[error(transparent)]
    Internal(#[from] anyhow::Error),
}

impl CliError {
    pub fn input(path: &Path, err: impl std::fmt::Display) -> CliError {
        CliError::BadInput { path: path.to_path_buf(), message: err.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::BadInput { .. } | CliError::BadArgs(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn internal(e: impl Into<anyhow::Error>) -> CliError {
    CliError::Internal(e.into())
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| CliError::input(path, e))?;
    sentimix::corpus::parse_conllu_bytes(&bytes).and_then(Dataset::new).map_err(|e| CliError::input(path, e))
}

fn read_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(path).map_err(|e| CliError::input(path, e))
}

fn read_checkpoint(path: &Path) -> Result<Model> {
    load_checkpoint(path).map_err(|e| CliError::input(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| internal(anyhow::anyhow!("creating {}: {e}", dir.display())))?;
    }
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).map_err(|e| internal(anyhow::anyhow!("writing {}: {e}", path.display())))
}

/// Writes `train.conllu` and `valid.conllu` under `out`: `synth_tweets`
/// noisy tweets, classes balanced to within one, split by
/// `synth_valid_fraction`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    let n = cfg.synth_tweets;
    if n < 2 || !(cfg.synth_valid_fraction > 0.0 && cfg.synth_valid_fraction < 1.0) {
        return Err(CliError::BadArgs("synth needs at least 2 tweets and a valid_fraction in (0, 1)".into()));
    }
    let synth = SynthConfig { n_per_class: n.div_ceil(3), ..SynthConfig::default() };
    let data = generate_synthetic(&synth, cfg.seed).map_err(internal)?;
    // Labels are shuffled, so trimming the surplus keeps classes within one.
    let mut tweets = data.into_tweets();
    tweets.truncate(n);
    let n_valid = ((n as f64 * cfg.synth_valid_fraction).round() as usize).clamp(1, n - 1);
    let valid = tweets.split_off(n - n_valid);
    let train_path = cfg.out.join("train.conllu");
    let valid_path = cfg.out.join("valid.conllu");
    write(&train_path, Dataset::new(tweets).map_err(internal)?.serialize())?;
    write(&valid_path, Dataset::new(valid).map_err(internal)?.serialize())?;
    Ok((train_path, valid_path))
}

/// Builds the vocabulary if `vocab` is unset or absent, pre-trains, and
/// writes the checkpoint plus a per-step history CSV.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<TrainHistory> {
    let data = read_dataset(&cfg.train)?;
    let norm = cfg.norm();
    let vocab_path = cfg.vocab_path();
    let vocab = match &cfg.vocab {
        Some(p) if p.exists() => read_vocab(p)?,
        _ => {
            let v = pipeline::build_run_vocab(data.tweets(), norm, cfg)?;
            write(&vocab_path, v.to_text())?;
            v
        }
    };
    let (model, history) = pipeline::pretrain(data.tweets(), &vocab, norm, cfg)?;
    save_model(&model, &cfg.out.join("pretrained.ckpt"))?;
    write(&cfg.out.join("pretrain_history.csv"), history.to_csv())?;
    Ok(history)
}

fn save_model(model: &Model, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    save_checkpoint(model, path).map_err(internal)
}

fn epoch_table(outcome: &FinetuneOutcome) -> String {
    let mut out = String::from("epoch,accuracy,weighted_f1\n");
    for (e, r) in outcome.reports.iter().enumerate() {
        let _ = writeln!(out, "{e},{},{}", r.accuracy, r.weighted_f1);
    }
    out
}

/// Fine-tunes from the pre-trained checkpoint (or a fresh encoder with
/// `from_scratch`), writing the final checkpoint, history and per-epoch
/// validation reports.
pub fn cmd_finetune(cfg: &RunConfig, from_scratch: bool) -> Result<FinetuneOutcome> {
    let train_set = read_dataset(&cfg.train)?;
    let valid_set = read_dataset(&cfg.valid)?;
    let vocab_path = cfg.vocab_path();
    let vocab = read_vocab(&vocab_path)?;
    let model = if from_scratch {
        let mcfg = pipeline::model_config(cfg, &vocab);
        Model::init(mcfg, sentimix::model::example_seed(cfg.seed, 1)).map_err(internal)?
    } else {
        let path = cfg.pretrained_path();
        let m = read_checkpoint(&path)?;
        if m.config().vocab_size != vocab.size() {
            return Err(CliError::input(&path, format!("checkpoint vocabulary size {} differs from {}", m.config().vocab_size, vocab.size())));
        }
        m
    };
    for (set, path) in [(&train_set, &cfg.train), (&valid_set, &cfg.valid)] {
        if let Some(t) = set.tweets().iter().find(|t| t.label.is_none()) {
            return Err(CliError::input(path, format!("tweet {} has no sentiment label", t.uid)));
        }
    }
    let (model, outcome) =
        pipeline::finetune(model, train_set.tweets(), valid_set.tweets(), &vocab, cfg.norm(), cfg)?;
    save_model(&model, &cfg.out.join("finetuned.ckpt"))?;
    write(&cfg.out.join("finetune_history.csv"), outcome.history.to_csv())?;
    write(&cfg.out.join("epoch_reports.csv"), epoch_table(&outcome))?;
    if let Some(last) = outcome.reports.last() {
        write(&cfg.out.join("report.txt"), last.to_text())?;
    }
    Ok(outcome)
}

/// Predicts every tweet in `test` (labels, if present, are ignored).
pub fn cmd_predict(cfg: &RunConfig) -> Result<PathBuf> {
    let data = read_dataset(&cfg.test)?;
    let vocab = read_vocab(&cfg.vocab_path())?;
    let ckpt = cfg.finetuned_path();
    let model = read_checkpoint(&ckpt)?;
    if model.head_kind() != HeadKind::Classifier {
        return Err(CliError::input(&ckpt, "checkpoint has no classifier head"));
    }
    let preds = predict_tweets(&model, data.tweets(), &vocab, cfg)?;
    let path = cfg.predictions_path();
    write(&path, eval::predictions_csv(data.tweets(), &preds).map_err(internal)?)?;
    Ok(path)
}

pub fn predict_tweets(model: &Model, tweets: &[Tweet], vocab: &Vocabulary, cfg: &RunConfig) -> Result<Vec<Sentiment>> {
    let encoded = train::encode_tweets(tweets, vocab, cfg.norm(), model.config().max_len);
    train::predict_encoded(model, &encoded).map_err(internal)
}

/// Scores a prediction CSV against the labels in `test`.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<EvalReport> {
    let gold = read_dataset(&cfg.test)?;
    let path = cfg.predictions_path();
    let preds = eval::read_predictions(&path).map_err(|e| CliError::input(&path, e))?;
    let mut y_true = Vec::new();
    let mut y_pred = Vec::new();
    for t in gold.tweets() {
        let label = t.label.ok_or_else(|| CliError::input(&cfg.test, format!("tweet {} has no label", t.uid)))?;
        let pred = preds
            .iter()
            .find(|(uid, _)| *uid == t.uid)
            .ok_or_else(|| CliError::input(&path, format!("no prediction for tweet {}", t.uid)))?;
        y_true.push(label);
        y_pred.push(pred.1);
    }
    let report = eval::evaluate(&y_true, &y_pred).map_err(|e| CliError::input(&cfg.test, e))?;
    write(&cfg.out.join("evaluation.txt"), report.to_text())?;
    Ok(report)
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let train_set = read_dataset(&cfg.train)?;
    let valid_set = read_dataset(&cfg.valid)?;
    let rows = pipeline::ablate(train_set.tweets(), valid_set.tweets(), cfg)?;
    write(&cfg.out.join("ablation.csv"), pipeline::ablation_csv(&rows))?;
    Ok(rows)
}
