//! Masked-LM pre-training and ULMFiT-style fine-tuning.
//!
//! Fine-tuning combines a slanted triangular learning rate, per-group
//! learning rates that shrink from the head downward, and gradual
//! unfreezing (one more group per epoch). Each of the three can be switched
//! off in [`TrainConfig`] for ablations.

mod optim;
mod schedule;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{Sentiment, Tweet};
use crate::eval::{evaluate, EvalError, EvalReport};
use crate::model::{example_seed, Example, HeadKind, Model, ModelError, Trainable};
use crate::textnorm::{normalize, NormConfig};
use crate::tokenizer::{encode, TokenSequence, Vocabulary, MASK, N_SPECIALS};

pub use optim::{adamw_step, AdamConfig, OptimizerState};
pub use schedule::{discriminative_lrs, frozen_groups, stlr, ScheduleConfig};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("step {t} is outside the schedule of {total_steps} steps")]
    StepOutOfRange { t: usize, total_steps: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("tweet {uid} has no sentiment label")]
    UnlabeledData { uid: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub weight_decay: f64,
    pub max_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub unfreeze_per_epoch: bool,
    /// Slanted triangular schedule; when off the rate is a constant `lr_max`.
    pub slanted_schedule: bool,
    /// Per-group rates decaying by `discr_factor`; when off all groups share one rate.
    pub discriminative: bool,
    /// Masking probability for pre-training.
    pub mask_rate: f64,
    /// Run exactly this many steps, cycling epochs as needed, instead of `epochs` full passes.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            weight_decay: 1e-2,
            max_len: 70,
            epochs: 3,
            seed: 0,
            adam: AdamConfig::default(),
            unfreeze_per_epoch: true,
            slanted_schedule: true,
            discriminative: true,
            mask_rate: 0.15,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// Turns the three fine-tuning mechanisms on or off together.
    pub fn with_ulmfit(self, on: bool) -> Self {
        TrainConfig { unfreeze_per_epoch: on, slanted_schedule: on, discriminative: on, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.max_len < 3 {
            return bad(format!("max_len must be >= 3, got {}", self.max_len));
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return bad("epochs must be >= 1".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return bad(format!("mask_rate must be in [0, 1], got {}", self.mask_rate));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps positive".into());
        }
        Ok(())
    }

    fn total_steps(&self, n_examples: usize) -> usize {
        let per_epoch = n_examples.div_ceil(self.batch_size);
        self.max_steps.unwrap_or(self.epochs * per_epoch)
    }
}

/// A tweet after normalization and tokenization.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTweet {
    pub uid: String,
    pub seq: TokenSequence,
    pub label: Option<Sentiment>,
}

/// The text fed to the tokenizer: normalized when `norm` is given, raw otherwise.
pub fn tweet_text(tweet: &Tweet, norm: Option<&NormConfig>) -> String {
    let raw = tweet.text();
    match norm {
        Some(cfg) => normalize(&raw, cfg),
        None => raw,
    }
}

pub fn encode_tweets(tweets: &[Tweet], vocab: &Vocabulary, norm: Option<&NormConfig>, max_len: usize) -> Vec<EncodedTweet> {
    tweets
        .iter()
        .map(|t| EncodedTweet { uid: t.uid.clone(), seq: encode(&tweet_text(t, norm), vocab, max_len), label: t.label })
        .collect()
}

/// Output of [`mask_tokens`]: the corrupted ids plus what was hidden where.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub originals: Vec<usize>,
}

impl MaskedSequence {
    pub fn targets(&self) -> Vec<(usize, usize)> {
        self.positions.iter().copied().zip(self.originals.iter().copied()).collect()
    }
}

/// Selects each real non-special token with probability `rate`. A selected
/// token becomes MASK 80% of the time, a random non-special id 10% of the
/// time, and stays as is otherwise.
pub fn mask_tokens(seq: &TokenSequence, rate: f64, vocab_size: usize, seed: u64) -> MaskedSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = seq.ids.clone();
    let (mut positions, mut originals) = (Vec::new(), Vec::new());
    for pos in 0..seq.real_len() {
        let id = ids[pos];
        if id < N_SPECIALS {
            continue;
        }
        if rng.gen::<f64>() >= rate {
            continue;
        }
        positions.push(pos);
        originals.push(id);
        let r = rng.gen::<f64>();
        if r < 0.8 {
            ids[pos] = MASK;
        } else if r < 0.9 {
            ids[pos] = rng.gen_range(N_SPECIALS..vocab_size);
        }
    }
    MaskedSequence { ids, positions, originals }
}

/// Index batches for one epoch: a seeded shuffle cut into `batch_size`
/// chunks, the last one possibly short.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(example_seed(seed, epoch)));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    /// Rate of the top (head) group.
    pub lr: f64,
    pub loss: f64,
    /// Present on the last step of each fine-tuning epoch.
    pub val_weighted_f1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,step,lr,loss,val_weighted_f1";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let f1 = r.val_weighted_f1.map(|f| f.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.epoch, r.step, r.lr, r.loss, f1);
        }
        out
    }

    /// Mean step loss for each epoch that logged at least one step.
    pub fn epoch_mean_losses(&self) -> Vec<f64> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some((e, sum, n)) if *e == r.epoch => {
                    *sum += r.loss;
                    *n += 1;
                }
                _ => out.push((r.epoch, r.loss, 1)),
            }
        }
        out.into_iter().map(|(_, s, n)| s / n as f64).collect()
    }
}

/// Per-epoch validation reports from [`finetune`].
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneOutcome {
    pub history: TrainHistory,
    pub reports: Vec<EvalReport>,
}

fn check_setup(model: &Model, head: HeadKind, data: &[EncodedTweet], cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if model.head_kind() != head {
        return Err(ModelError::WrongHead { expected: head, found: model.head_kind() }.into());
    }
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.max_len != model.config().max_len {
        return Err(TrainError::InvalidConfig(format!(
            "training max_len {} differs from the model's {}",
            cfg.max_len,
            model.config().max_len
        )));
    }
    if let Some(bad) = data.iter().find(|t| t.seq.len() != cfg.max_len) {
        return Err(TrainError::ShapeMismatch(format!("tweet {} encoded to length {}", bad.uid, bad.seq.len())));
    }
    Ok(())
}

fn require_labels(data: &[EncodedTweet]) -> Result<()> {
    match data.iter().find(|t| t.label.is_none()) {
        Some(t) => Err(TrainError::UnlabeledData { uid: t.uid.clone() }),
        None => Ok(()),
    }
}

// Streams derived from the run seed; distinct tags keep them independent.
const DROPOUT_STREAM: u64 = 0xD0;
const MASK_STREAM: u64 = 0x3A5C;

/// Masked-LM pre-training. Every group trains at the same rate, following
/// the slanted schedule when it is enabled. `sched.total_steps` is replaced
/// by the actual run length.
pub fn pretrain_mlm(
    mut model: Model,
    data: &[EncodedTweet],
    cfg: &TrainConfig,
    sched: &ScheduleConfig,
) -> Result<(Model, TrainHistory)> {
    check_setup(&model, HeadKind::Mlm, data, cfg)?;
    let total = cfg.total_steps(data.len());
    let sched = sched.with_total_steps(total);
    sched.validate()?;
    let groups = model.groups();
    let mut state = OptimizerState::new(model.params(), groups.len());
    let vocab_size = model.config().vocab_size;
    let mut history = TrainHistory::default();

    let mut step = 0;
    'epochs: for epoch in 0.. {
        for batch in epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch) {
            if step == total {
                break 'epochs;
            }
            let mask_seed = example_seed(cfg.seed ^ MASK_STREAM, step);
            let masked: Vec<MaskedSequence> = batch
                .iter()
                .map(|&i| mask_tokens(&data[i].seq, cfg.mask_rate, vocab_size, example_seed(mask_seed, i)))
                .collect();
            let targets: Vec<Vec<(usize, usize)>> = masked.iter().map(MaskedSequence::targets).collect();
            let examples: Vec<Example> = batch
                .iter()
                .zip(masked.iter().zip(&targets))
                .filter(|(_, (_, t))| !t.is_empty())
                .map(|(&i, (m, t))| Example::Mlm { ids: &m.ids[..data[i].seq.real_len()], targets: t })
                .collect();
            let lr = if cfg.slanted_schedule { stlr(step, &sched)? } else { sched.lr_max };
            if !examples.is_empty() {
                let dropout = example_seed(cfg.seed ^ DROPOUT_STREAM, step);
                let (loss, grads) = model.loss_and_grad(&examples, Some(dropout), Trainable::all())?;
                let rates = vec![Some(lr); groups.len()];
                adamw_step(model.params_mut(), &grads, &mut state, &groups, &rates, cfg.weight_decay, &cfg.adam)?;
                history.rows.push(HistoryRow { epoch, step, lr, loss, val_weighted_f1: None });
            }
            step += 1;
        }
    }
    Ok((model, history))
}

/// Class predictions for encoded tweets, in input order.
pub fn predict_encoded(model: &Model, data: &[EncodedTweet]) -> Result<Vec<Sentiment>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(64) {
        let seqs: Vec<TokenSequence> = chunk.iter().map(|t| t.seq.clone()).collect();
        out.extend(model.predict(&seqs)?);
    }
    Ok(out)
}

pub fn evaluate_encoded(model: &Model, data: &[EncodedTweet]) -> Result<EvalReport> {
    require_labels(data)?;
    let preds = predict_encoded(model, data)?;
    let gold: Vec<Sentiment> = data.iter().map(|t| t.label.expect("checked labeled")).collect();
    Ok(evaluate(&gold, &preds)?)
}

/// Rates for one step in head-first group order; `None` marks a frozen group.
pub fn step_rates(
    step: usize,
    epoch: usize,
    n_groups: usize,
    cfg: &TrainConfig,
    sched: &ScheduleConfig,
) -> Result<Vec<Option<f64>>> {
    let top = if cfg.slanted_schedule { stlr(step, sched)? } else { sched.lr_max };
    let rates = if cfg.discriminative {
        discriminative_lrs(top, sched.discr_factor, n_groups)
    } else {
        vec![top; n_groups]
    };
    let frozen = if cfg.unfreeze_per_epoch { frozen_groups(epoch, n_groups) } else { Default::default() };
    Ok(rates.into_iter().enumerate().map(|(g, lr)| (!frozen.contains(&g)).then_some(lr)).collect())
}

/// Classifier fine-tuning over `cfg.epochs` passes (or `cfg.max_steps`
/// steps), evaluating on `valid` after every epoch. `sched.total_steps` is
/// replaced by the actual run length.
pub fn finetune(
    mut model: Model,
    train: &[EncodedTweet],
    valid: &[EncodedTweet],
    cfg: &TrainConfig,
    sched: &ScheduleConfig,
) -> Result<(Model, FinetuneOutcome)> {
    check_setup(&model, HeadKind::Classifier, train, cfg)?;
    check_setup(&model, HeadKind::Classifier, valid, cfg)?;
    require_labels(train)?;
    require_labels(valid)?;
    let total = cfg.total_steps(train.len());
    let sched = sched.with_total_steps(total);
    sched.validate()?;
    let groups = model.groups();
    let mut state = OptimizerState::new(model.params(), groups.len());
    let mut outcome = FinetuneOutcome { history: TrainHistory::default(), reports: Vec::new() };

    let mut step = 0;
    let mut epoch = 0;
    while step < total {
        for batch in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch) {
            if step == total {
                break;
            }
            let rates = step_rates(step, epoch, groups.len(), cfg, &sched)?;
            let depth = rates.iter().rposition(Option::is_some).map_or(1, |g| g + 1);
            let examples: Vec<Example> = batch
                .iter()
                .map(|&i| Example::Classify {
                    ids: train[i].seq.real_ids(),
                    label: train[i].label.expect("checked labeled").index(),
                })
                .collect();
            let dropout = example_seed(cfg.seed ^ DROPOUT_STREAM, step);
            let (loss, grads) = model.loss_and_grad(&examples, Some(dropout), Trainable::top_groups(depth))?;
            adamw_step(model.params_mut(), &grads, &mut state, &groups, &rates, cfg.weight_decay, &cfg.adam)?;
            let lr = rates[0].expect("head always trains");
            outcome.history.rows.push(HistoryRow { epoch, step, lr, loss, val_weighted_f1: None });
            step += 1;
        }
        let report = evaluate_encoded(&model, valid)?;
        if let Some(last) = outcome.history.rows.last_mut() {
            last.val_weighted_f1 = Some(report.weighted_f1);
        }
        outcome.reports.push(report);
        epoch += 1;
    }
    Ok((model, outcome))
}

#[cfg(test)]
mod tests;
