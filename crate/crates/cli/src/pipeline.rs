//! The end-to-end pipeline on in-memory data, shared by the commands and
//! the ablation harness.

use anyhow::{Context, Result};
use sentimix::corpus::Tweet;
use sentimix::model::{example_seed, HeadKind, Model, ModelConfig};
use sentimix::textnorm::NormConfig;
use sentimix::tokenizer::{build_vocab, Vocabulary};
use sentimix::train::{self, encode_tweets, tweet_text, FinetuneOutcome, TrainHistory};

use crate::config::RunConfig;

// Independent seed streams derived from the run seed.
const INIT_STREAM: usize = 1;
const HEAD_STREAM: usize = 2;

pub fn build_run_vocab(tweets: &[Tweet], norm: Option<&NormConfig>, cfg: &RunConfig) -> Result<Vocabulary> {
    let texts: Vec<String> = tweets.iter().map(|t| tweet_text(t, norm)).collect();
    build_vocab(&texts, cfg.vocab_target, cfg.vocab_min_freq).context("building the vocabulary")
}

pub fn model_config(cfg: &RunConfig, vocab: &Vocabulary) -> ModelConfig {
    ModelConfig { vocab_size: vocab.size(), ..cfg.model.clone() }
}

/// Initializes a model and pre-trains it with the masked-LM objective.
pub fn pretrain(
    tweets: &[Tweet],
    vocab: &Vocabulary,
    norm: Option<&NormConfig>,
    cfg: &RunConfig,
) -> Result<(Model, TrainHistory)> {
    let mcfg = model_config(cfg, vocab);
    let model = Model::init(mcfg.clone(), example_seed(cfg.seed, INIT_STREAM))?;
    let data = encode_tweets(tweets, vocab, norm, mcfg.max_len);
    let (model, history) = train::pretrain_mlm(model, &data, &cfg.pretrain_phase(), &cfg.pretrain.sched)?;
    Ok((model, history))
}

/// Swaps in a fresh classifier head and fine-tunes on labeled tweets.
pub fn finetune(
    model: Model,
    train_set: &[Tweet],
    valid_set: &[Tweet],
    vocab: &Vocabulary,
    norm: Option<&NormConfig>,
    cfg: &RunConfig,
) -> Result<(Model, FinetuneOutcome)> {
    let max_len = model.config().max_len;
    let model = model.swap_head(HeadKind::Classifier, example_seed(cfg.seed, HEAD_STREAM));
    let train_data = encode_tweets(train_set, vocab, norm, max_len);
    let valid_data = encode_tweets(valid_set, vocab, norm, max_len);
    let (model, outcome) = train::finetune(model, &train_data, &valid_data, &cfg.finetune_phase(), &cfg.finetune.sched)?;
    Ok((model, outcome))
}

pub const ABLATION_ROWS: [&str; 3] = ["base", "w/pre-processing data", "w/pre-processing data + ulmfit fine-tuning"];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub configuration: &'static str,
    /// Final-epoch validation weighted-F1, one per seed.
    pub scores: Vec<f64>,
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}

fn final_f1(outcome: &FinetuneOutcome) -> f64 {
    outcome.reports.last().map_or(0.0, |r| r.weighted_f1)
}

/// Runs the three ablation configurations over `cfg.seeds`:
/// raw text without the fine-tuning mechanisms, normalized text without
/// them, and normalized text with them. Rows two and three share the
/// pre-trained encoder for a given seed.
pub fn ablate(train_set: &[Tweet], valid_set: &[Tweet], cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> =
        ABLATION_ROWS.iter().map(|&configuration| AblationRow { configuration, scores: Vec::new() }).collect();
    for &seed in &cfg.seeds {
        let run = RunConfig { seed, ..cfg.clone() };
        let plain = RunConfig { ulmfit: false, ..run.clone() };
        let full = RunConfig { ulmfit: true, ..run.clone() };

        let vocab = build_run_vocab(train_set, None, &run)?;
        let (model, _) = pretrain(train_set, &vocab, None, &run)?;
        let (_, base) = finetune(model, train_set, valid_set, &vocab, None, &plain)?;
        rows[0].scores.push(final_f1(&base));

        let norm = Some(&cfg.norm);
        let vocab = build_run_vocab(train_set, norm, &run)?;
        let (model, _) = pretrain(train_set, &vocab, norm, &run)?;
        let (_, pre) = finetune(model.clone(), train_set, valid_set, &vocab, norm, &plain)?;
        rows[1].scores.push(final_f1(&pre));
        let (_, ulmfit) = finetune(model, train_set, valid_set, &vocab, norm, &full)?;
        rows[2].scores.push(final_f1(&ulmfit));
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("configuration,mean_weighted_f1,seed_scores\n");
    for r in rows {
        let scores: Vec<String> = r.scores.iter().map(|s| s.to_string()).collect();
        out.push_str(&format!("{},{},{}\n", r.configuration, r.mean(), scores.join(";")));
    }
    out
}
