//! BERT-style encoder with a single swappable output head.
//!
//! Parameters are kept in plain structs; [`Params::tensors`] exposes them in
//! one canonical order (embeddings, layers bottom-up, head) that the
//! optimizer, checkpoints and gradient checks all share. Parameter groups
//! for discriminative fine-tuning run the other way: head first, embeddings
//! last.

mod checkpoint;
mod encoder;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::corpus::Sentiment;
use crate::numerics::{NumericsError, Tensor};
use crate::tokenizer::TokenSequence;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, model_from_bytes, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use encoder::{example_seed, Example, Trainable};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    IdOutOfRange { id: usize, vocab_size: usize },
    #[error("operation needs the {expected} head but the {found} head is attached")]
    WrongHead { expected: HeadKind, found: HeadKind },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch (file truncated or corrupted)")]
    ChecksumMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            hidden: 128,
            n_heads: 4,
            ff_dim: 512,
            vocab_size: 8000,
            max_len: 70,
            n_classes: 3,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    /// The configuration used for full-model gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            n_layers: 2,
            hidden: 8,
            n_heads: 2,
            ff_dim: 16,
            vocab_size: 32,
            max_len: 8,
            n_classes: 3,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.n_layers == 0 || self.hidden == 0 || self.n_heads == 0 || self.ff_dim == 0 {
            return bad("n_layers, hidden, n_heads and ff_dim must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.n_heads) {
            return bad(format!("hidden {} is not divisible by n_heads {}", self.hidden, self.n_heads));
        }
        if self.max_len < 3 {
            return bad(format!("max_len must be >= 3, got {}", self.max_len));
        }
        if self.n_classes != 3 {
            return bad(format!("n_classes must be 3, got {}", self.n_classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.vocab_size < crate::tokenizer::N_SPECIALS + 1 {
            return bad(format!("vocab_size must exceed the special tokens, got {}", self.vocab_size));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    /// Closed-form parameter count for a model carrying `head`.
    pub fn parameter_count(&self, head: HeadKind) -> usize {
        let (h, f) = (self.hidden, self.ff_dim);
        let per_layer = 4 * h * h + 3 * h + (h * f + f) + (f * h + h) + 4 * h;
        let head_out = head.outputs(self);
        self.vocab_size * h + self.max_len * h + self.n_layers * per_layer + h * head_out + head_out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Mlm,
    Classifier,
}

impl HeadKind {
    pub fn outputs(self, config: &ModelConfig) -> usize {
        match self {
            HeadKind::Mlm => config.vocab_size,
            HeadKind::Classifier => config.n_classes,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Mlm => "mlm",
            HeadKind::Classifier => "classifier",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub token: Tensor,
    pub position: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub wq: Tensor,
    pub bq: Tensor,
    /// Keys carry no bias: it would shift every score in a query row by the
    /// same amount, which softmax ignores, so its gradient is identically zero.
    pub wk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub w_ff1: Tensor,
    pub b_ff1: Tensor,
    pub w_ff2: Tensor,
    pub b_ff2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

const LAYER_TENSOR_NAMES: [&str; 15] = [
    "attn.wq", "attn.bq", "attn.wk", "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln1.gamma",
    "ln1.beta", "ff.w1", "ff.b1", "ff.w2", "ff.b2", "ln2.gamma", "ln2.beta",
];

impl EncoderLayer {
    fn tensors(&self) -> [&Tensor; 15] {
        [
            &self.wq, &self.bq, &self.wk, &self.wv, &self.bv, &self.wo, &self.bo, &self.ln1_gamma,
            &self.ln1_beta, &self.w_ff1, &self.b_ff1, &self.w_ff2, &self.b_ff2, &self.ln2_gamma, &self.ln2_beta,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 15] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
        ]
    }
}

/// Output layer: an affine map from the hidden size to vocabulary logits
/// (MLM, applied at masked positions) or to class logits (classifier,
/// applied at the CLS position).
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub kind: HeadKind,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub embeddings: Embeddings,
    pub layers: Vec<EncoderLayer>,
    pub head: Head,
}

impl Params {
    /// All tensors in canonical order: embeddings, layers 0..n, head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embeddings.token, &self.embeddings.position];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embeddings.token, &mut self.embeddings.position];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec!["embeddings.token".to_string(), "embeddings.position".to_string()];
        for l in 0..self.layers.len() {
            out.extend(LAYER_TENSOR_NAMES.iter().map(|n| format!("layers.{l}.{n}")));
        }
        out.push(format!("head.{}.weight", self.head.kind));
        out.push(format!("head.{}.bias", self.head.kind));
        out
    }

    pub fn zeros_like(&self) -> Params {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites every tensor from a flat vector in canonical order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(ModelError::ShapeMismatch(format!(
                "flat vector of {} values for {} parameters",
                flat.len(),
                self.scalar_count()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }
}

/// A named set of canonical tensor indices trained at one learning rate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub name: String,
    pub tensor_indices: Vec<usize>,
}

/// Groups in head-first order: head, layer n−1, …, layer 0, embeddings.
pub fn param_groups(n_layers: usize) -> Vec<ParamGroup> {
    let per_layer = LAYER_TENSOR_NAMES.len();
    let head_start = 2 + n_layers * per_layer;
    let mut groups = vec![ParamGroup { name: "head".into(), tensor_indices: vec![head_start, head_start + 1] }];
    for l in (0..n_layers).rev() {
        let start = 2 + l * per_layer;
        groups.push(ParamGroup { name: format!("layer{l}"), tensor_indices: (start..start + per_layer).collect() });
    }
    groups.push(ParamGroup { name: "embeddings".into(), tensor_indices: vec![0, 1] });
    groups
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Params,
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|x| *x = dist.sample(rng));
    t
}

fn init_head(config: &ModelConfig, kind: HeadKind, rng: &mut ChaCha8Rng) -> Head {
    let out = kind.outputs(config);
    Head { kind, weight: normal_tensor(&[config.hidden, out], rng), bias: Tensor::zeros(&[out]) }
}

impl Model {
    /// Seeded initialization with an MLM head attached.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, f) = (config.hidden, config.ff_dim);
        let embeddings = Embeddings {
            token: normal_tensor(&[config.vocab_size, h], &mut rng),
            position: normal_tensor(&[config.max_len, h], &mut rng),
        };
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer {
                wq: normal_tensor(&[h, h], &mut rng),
                bq: Tensor::zeros(&[h]),
                wk: normal_tensor(&[h, h], &mut rng),
                wv: normal_tensor(&[h, h], &mut rng),
                bv: Tensor::zeros(&[h]),
                wo: normal_tensor(&[h, h], &mut rng),
                bo: Tensor::zeros(&[h]),
                ln1_gamma: Tensor::filled(&[h], 1.0),
                ln1_beta: Tensor::zeros(&[h]),
                w_ff1: normal_tensor(&[h, f], &mut rng),
                b_ff1: Tensor::zeros(&[f]),
                w_ff2: normal_tensor(&[f, h], &mut rng),
                b_ff2: Tensor::zeros(&[h]),
                ln2_gamma: Tensor::filled(&[h], 1.0),
                ln2_beta: Tensor::zeros(&[h]),
            })
            .collect();
        let head = init_head(&config, HeadKind::Mlm, &mut rng);
        Ok(Model { config, params: Params { embeddings, layers, head } })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn head_kind(&self) -> HeadKind {
        self.params.head.kind
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        param_groups(self.config.n_layers)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Replaces the head with a freshly initialized one of kind `target`.
    /// Embedding and encoder parameters are left untouched.
    pub fn swap_head(mut self, target: HeadKind, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.params.head = init_head(&self.config, target, &mut rng);
        self
    }

    /// CRC-32 over the bit patterns of all embedding and encoder tensors.
    pub fn encoder_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        let tensors = self.params.tensors();
        for t in &tensors[..tensors.len() - 2] {
            for v in t.data() {
                h.update(&v.to_bits().to_le_bytes());
            }
        }
        h.finalize()
    }

    fn require_head(&self, expected: HeadKind) -> Result<()> {
        if self.head_kind() != expected {
            return Err(ModelError::WrongHead { expected, found: self.head_kind() });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &[TokenSequence]) -> Result<()> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        for seq in batch {
            if seq.ids.len() != self.config.max_len || seq.attention_mask.len() != self.config.max_len {
                return Err(ModelError::ShapeMismatch(format!(
                    "sequence of length {} for max_len {}",
                    seq.ids.len(),
                    self.config.max_len
                )));
            }
        }
        Ok(())
    }

    /// Hidden states for every position, shape [b, max_len, hidden]. PAD
    /// positions are masked out as attention keys. Dropout is applied only
    /// when `train_mode` is set, seeded from `seed` and the batch index.
    pub fn forward_encoder(&self, batch: &[TokenSequence], train_mode: bool, seed: u64) -> Result<Tensor> {
        self.check_batch(batch)?;
        let (m, h) = (self.config.max_len, self.config.hidden);
        let mut out = Vec::with_capacity(batch.len() * m * h);
        for (i, seq) in batch.iter().enumerate() {
            let dropout = train_mode.then(|| encoder::example_seed(seed, i));
            let cache = encoder::forward_sequence(&self.params, &self.config, &seq.ids, Some(&seq.attention_mask), dropout)?;
            out.extend_from_slice(cache.output().data());
        }
        Ok(Tensor::new(vec![batch.len(), m, h], out)?)
    }

    /// Vocabulary logits at `(batch index, position)` pairs, shape [#masked, vocab].
    pub fn forward_mlm(&self, batch: &[TokenSequence], masked_positions: &[(usize, usize)]) -> Result<Tensor> {
        self.require_head(HeadKind::Mlm)?;
        self.check_batch(batch)?;
        let (h, v) = (self.config.hidden, self.config.vocab_size);
        let mut rows = Vec::with_capacity(masked_positions.len() * h);
        let mut cache_of: Vec<Option<encoder::SeqCache>> = (0..batch.len()).map(|_| None).collect();
        for &(b, pos) in masked_positions {
            let seq = batch.get(b).ok_or_else(|| ModelError::ShapeMismatch(format!("batch index {b}")))?;
            if pos >= seq.real_len() {
                return Err(ModelError::ShapeMismatch(format!("masked position {pos} is not a real token")));
            }
            if cache_of[b].is_none() {
                cache_of[b] = Some(encoder::forward_sequence(&self.params, &self.config, seq.real_ids(), None, None)?);
            }
            rows.extend_from_slice(cache_of[b].as_ref().unwrap().output().row(pos));
        }
        let hidden = Tensor::matrix(masked_positions.len(), h, rows);
        let mut logits = Tensor::matrix(masked_positions.len(), v, vec![0.0; masked_positions.len() * v]);
        encoder::apply_head(&self.params.head, &hidden, &mut logits);
        Ok(logits)
    }

    /// Class logits from the CLS position, shape [b, 3].
    pub fn forward_classify(&self, batch: &[TokenSequence]) -> Result<Tensor> {
        self.require_head(HeadKind::Classifier)?;
        self.check_batch(batch)?;
        let (h, c) = (self.config.hidden, self.config.n_classes);
        let mut cls = Vec::with_capacity(batch.len() * h);
        for seq in batch {
            let cache = encoder::forward_sequence(&self.params, &self.config, seq.real_ids(), None, None)?;
            cls.extend_from_slice(cache.output().row(0));
        }
        let hidden = Tensor::matrix(batch.len(), h, cls);
        let mut logits = Tensor::matrix(batch.len(), c, vec![0.0; batch.len() * c]);
        encoder::apply_head(&self.params.head, &hidden, &mut logits);
        Ok(logits)
    }

    pub fn predict(&self, batch: &[TokenSequence]) -> Result<Vec<Sentiment>> {
        let logits = self.forward_classify(batch)?;
        Ok((0..logits.rows()).map(|r| argmax_sentiment(logits.row(r))).collect())
    }

    /// Mean loss over `examples` and its gradient with respect to every
    /// parameter. With `dropout_seed` set, dropout is active and seeded per
    /// example index. Gradients are only propagated as deep as `trainable`
    /// requires; tensors below that depth receive zero gradient.
    pub fn loss_and_grad(
        &self,
        examples: &[Example<'_>],
        dropout_seed: Option<u64>,
        trainable: Trainable,
    ) -> Result<(f64, Params)> {
        encoder::loss_and_grad(self, examples, dropout_seed, trainable)
    }

    /// Loss only, no gradient; uses the same normalization as `loss_and_grad`.
    pub fn loss(&self, examples: &[Example<'_>], dropout_seed: Option<u64>) -> Result<f64> {
        encoder::loss_only(self, examples, dropout_seed)
    }
}

/// Index of the largest logit; ties go to the earlier class in `Sentiment` order.
pub fn argmax_sentiment(logits: &[f64]) -> Sentiment {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    Sentiment::from_index(best).expect("three class logits")
}
