//! Per-sequence forward and backward passes.
//!
//! Sequences are processed one at a time at their real length; PAD
//! positions never influence real positions (they are masked as keys and
//! every other sub-layer is position-wise), so dropping them is exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EncoderLayer, Head, HeadKind, Model, ModelConfig, ModelError, Params, Result};
use crate::numerics::{
    gemm_nn, gemm_nt, gemm_tn, layer_norm, layer_norm_backward, softmax_backward_row, softmax_in_place,
    LayerNormCache, Tensor, LAYER_NORM_EPS,
};
use crate::numerics::{gelu_grad_scalar, gelu_scalar};

/// One training or evaluation example over real (unpadded) ids.
#[derive(Debug, Clone, Copy)]
pub enum Example<'a> {
    /// `targets` holds (position, original id) pairs for the masked positions.
    Mlm { ids: &'a [usize], targets: &'a [(usize, usize)] },
    /// `label` is a `Sentiment` index.
    Classify { ids: &'a [usize], label: usize },
}

impl Example<'_> {
    fn ids(&self) -> &[usize] {
        match self {
            Example::Mlm { ids, .. } | Example::Classify { ids, .. } => ids,
        }
    }

    fn head(&self) -> HeadKind {
        match self {
            Example::Mlm { .. } => HeadKind::Mlm,
            Example::Classify { .. } => HeadKind::Classifier,
        }
    }

    fn count(&self) -> usize {
        match self {
            Example::Mlm { targets, .. } => targets.len(),
            Example::Classify { .. } => 1,
        }
    }
}

/// How many parameter groups (head first) receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    depth: usize,
}

impl Trainable {
    pub fn all() -> Self {
        Trainable { depth: usize::MAX }
    }

    pub fn head_only() -> Self {
        Trainable { depth: 1 }
    }

    /// The first `depth` groups in head-first order.
    pub fn top_groups(depth: usize) -> Self {
        Trainable { depth: depth.max(1) }
    }

    /// Enough depth to cover every group not in `frozen`.
    pub fn excluding(frozen: &std::collections::BTreeSet<usize>, n_groups: usize) -> Self {
        let deepest = (0..n_groups).filter(|g| !frozen.contains(g)).max().unwrap_or(0);
        Trainable { depth: deepest + 1 }
    }

    fn lowest_layer(&self, n_layers: usize) -> usize {
        // depth 1 → none (n_layers), depth 2 → top layer only, …
        n_layers.saturating_sub(self.depth.saturating_sub(1))
    }

    fn embeddings(&self, n_layers: usize) -> bool {
        self.depth >= n_layers + 2
    }
}

/// Derives an independent seed for item `index` of a stream seeded by `seed`.
pub fn example_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn dropout_mask(rng: &mut ChaCha8Rng, rate: f64, n: usize) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect()
}

fn apply_mask(t: &mut Tensor, mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        for (x, s) in t.data_mut().iter_mut().zip(m) {
            *x *= s;
        }
    }
}

/// y = x·W + b for x [rows, in], W [in, out].
fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (rows, inp, out) = (x.rows(), w.shape()[0], w.shape()[1]);
    let mut y = match b {
        Some(b) => b.data().repeat(rows),
        None => vec![0.0; rows * out],
    };
    gemm_nn(x.data(), w.data(), &mut y, rows, inp, out);
    Tensor::matrix(rows, out, y)
}

/// Accumulates dW, db (when there is a bias) and dx (when asked) for y = x·W + b.
fn linear_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    dw: &mut Tensor,
    db: Option<&mut Tensor>,
    dx: Option<&mut Tensor>,
) {
    let (rows, inp, out) = (x.rows(), w.shape()[0], w.shape()[1]);
    gemm_tn(x.data(), dy.data(), dw.data_mut(), rows, inp, out);
    if let Some(db) = db {
        for r in 0..rows {
            for (acc, g) in db.data_mut().iter_mut().zip(dy.row(r)) {
                *acc += g;
            }
        }
    }
    if let Some(dx) = dx {
        gemm_nt(dy.data(), w.data(), dx.data_mut(), rows, out, inp);
    }
}

pub(crate) fn apply_head(head: &Head, hidden: &Tensor, logits: &mut Tensor) {
    if hidden.rows() == 0 {
        return;
    }
    let y = linear(hidden, &head.weight, Some(&head.bias));
    logits.data_mut().copy_from_slice(y.data());
}

struct LayerCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// [n_heads, L, L]; zero at masked keys.
    probs: Vec<f64>,
    ctx: Tensor,
    attn_mask: Option<Vec<f64>>,
    ln1: LayerNormCache,
    y1: Tensor,
    u: Tensor,
    g: Tensor,
    ff_mask: Option<Vec<f64>>,
    ln2: LayerNormCache,
}

pub(crate) struct SeqCache {
    ids: Vec<usize>,
    emb_mask: Option<Vec<f64>>,
    layers: Vec<LayerCache>,
    output: Tensor,
}

impl SeqCache {
    pub(crate) fn output(&self) -> &Tensor {
        &self.output
    }

    #[cfg(test)]
    pub(crate) fn attention(&self, layer: usize) -> &[f64] {
        &self.layers[layer].probs
    }
}

pub(crate) fn forward_sequence(
    params: &Params,
    cfg: &ModelConfig,
    ids: &[usize],
    key_mask: Option<&[u8]>,
    dropout_seed: Option<u64>,
) -> Result<SeqCache> {
    let (len, h) = (ids.len(), cfg.hidden);
    if len == 0 || len > cfg.max_len {
        return Err(ModelError::ShapeMismatch(format!("sequence length {len} for max_len {}", cfg.max_len)));
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(ModelError::IdOutOfRange { id, vocab_size: cfg.vocab_size });
    }
    if let Some(mask) = key_mask {
        if mask.len() != len || !mask.contains(&1) {
            return Err(ModelError::ShapeMismatch("attention mask must cover the sequence and keep one key".into()));
        }
    }
    let mut rng = dropout_seed.filter(|_| cfg.dropout > 0.0).map(ChaCha8Rng::seed_from_u64);

    let mut x = Tensor::matrix(len, h, vec![0.0; len * h]);
    for (i, &id) in ids.iter().enumerate() {
        let tok = params.embeddings.token.row(id);
        let pos = params.embeddings.position.row(i);
        for ((o, a), b) in x.row_mut(i).iter_mut().zip(tok).zip(pos) {
            *o = a + b;
        }
    }
    let emb_mask = rng.as_mut().map(|r| dropout_mask(r, cfg.dropout, len * h));
    apply_mask(&mut x, &emb_mask);

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for layer in &params.layers {
        let (out, cache) = layer_forward(layer, cfg, x, key_mask, rng.as_mut())?;
        layers.push(cache);
        x = out;
    }
    Ok(SeqCache { ids: ids.to_vec(), emb_mask, layers, output: x })
}

fn layer_forward(
    layer: &EncoderLayer,
    cfg: &ModelConfig,
    x: Tensor,
    key_mask: Option<&[u8]>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor, LayerCache)> {
    let (len, h, nh, dh) = (x.rows(), cfg.hidden, cfg.n_heads, cfg.head_dim());
    let q = linear(&x, &layer.wq, Some(&layer.bq));
    let k = linear(&x, &layer.wk, None);
    let v = linear(&x, &layer.wv, Some(&layer.bv));
    let scale = 1.0 / (dh as f64).sqrt();
    let valid = |j: usize| key_mask.is_none_or(|m| m[j] == 1);

    let mut probs = vec![0.0; nh * len * len];
    let mut ctx = Tensor::matrix(len, h, vec![0.0; len * h]);
    let mut scores = Vec::with_capacity(len);
    let mut keys = Vec::with_capacity(len);
    for j in 0..len {
        if valid(j) {
            keys.push(j);
        }
    }
    for head in 0..nh {
        let off = head * dh;
        for i in 0..len {
            let qi = &q.row(i)[off..off + dh];
            scores.clear();
            for &j in &keys {
                let kj = &k.row(j)[off..off + dh];
                scores.push(qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale);
            }
            softmax_in_place(&mut scores);
            let prow = &mut probs[(head * len + i) * len..(head * len + i + 1) * len];
            for (&j, &p) in keys.iter().zip(&scores) {
                prow[j] = p;
            }
            let crow = &mut ctx.row_mut(i)[off..off + dh];
            for (&j, &p) in keys.iter().zip(&scores) {
                let vj = &v.row(j)[off..off + dh];
                for (c, vv) in crow.iter_mut().zip(vj) {
                    *c += p * vv;
                }
            }
        }
    }

    let mut a = linear(&ctx, &layer.wo, Some(&layer.bo));
    let attn_mask = rng.as_deref_mut().map(|r| dropout_mask(r, cfg.dropout, len * h));
    apply_mask(&mut a, &attn_mask);
    a.add_assign(&x);
    let (y1, ln1) = layer_norm(&a, &layer.ln1_gamma, &layer.ln1_beta, LAYER_NORM_EPS)?;

    let u = linear(&y1, &layer.w_ff1, Some(&layer.b_ff1));
    let g = Tensor::matrix(u.rows(), u.cols(), u.data().iter().map(|&z| gelu_scalar(z)).collect());
    let mut f = linear(&g, &layer.w_ff2, Some(&layer.b_ff2));
    let ff_mask = rng.as_deref_mut().map(|r| dropout_mask(r, cfg.dropout, len * h));
    apply_mask(&mut f, &ff_mask);
    f.add_assign(&y1);
    let (y2, ln2) = layer_norm(&f, &layer.ln2_gamma, &layer.ln2_beta, LAYER_NORM_EPS)?;

    Ok((y2, LayerCache { x, q, k, v, probs, ctx, attn_mask, ln1, y1, u, g, ff_mask, ln2 }))
}

fn layer_backward(
    layer: &EncoderLayer,
    cfg: &ModelConfig,
    cache: &LayerCache,
    dy: &Tensor,
    grads: &mut EncoderLayer,
    need_dx: bool,
) -> Option<Tensor> {
    let (len, nh, dh) = (cache.x.rows(), cfg.n_heads, cfg.head_dim());

    let (dr2, dg2, db2) = layer_norm_backward(&cache.ln2, &layer.ln2_gamma, dy);
    grads.ln2_gamma.add_assign(&dg2);
    grads.ln2_beta.add_assign(&db2);

    let mut dy1 = dr2.clone();
    let mut df = dr2;
    apply_mask(&mut df, &cache.ff_mask);
    let mut dg = cache.g.zeros_like();
    linear_backward(&cache.g, &layer.w_ff2, &df, &mut grads.w_ff2, Some(&mut grads.b_ff2), Some(&mut dg));
    let mut du = dg;
    for (d, &z) in du.data_mut().iter_mut().zip(cache.u.data()) {
        *d *= gelu_grad_scalar(z);
    }
    linear_backward(&cache.y1, &layer.w_ff1, &du, &mut grads.w_ff1, Some(&mut grads.b_ff1), Some(&mut dy1));

    let (dr1, dg1, db1) = layer_norm_backward(&cache.ln1, &layer.ln1_gamma, &dy1);
    grads.ln1_gamma.add_assign(&dg1);
    grads.ln1_beta.add_assign(&db1);

    let mut da = dr1.clone();
    apply_mask(&mut da, &cache.attn_mask);
    let mut dctx = cache.ctx.zeros_like();
    linear_backward(&cache.ctx, &layer.wo, &da, &mut grads.wo, Some(&mut grads.bo), Some(&mut dctx));

    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = cache.q.zeros_like();
    let mut dk = cache.k.zeros_like();
    let mut dv = cache.v.zeros_like();
    let mut dp = vec![0.0; len];
    let mut ds = vec![0.0; len];
    for head in 0..nh {
        let off = head * dh;
        for i in 0..len {
            let prow = &cache.probs[(head * len + i) * len..(head * len + i + 1) * len];
            let dci = &dctx.row(i)[off..off + dh];
            for j in 0..len {
                if prow[j] == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                let vj = &cache.v.row(j)[off..off + dh];
                dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                let dvj = &mut dv.row_mut(j)[off..off + dh];
                for (d, c) in dvj.iter_mut().zip(dci) {
                    *d += prow[j] * c;
                }
            }
            softmax_backward_row(prow, &dp, &mut ds);
            let qi = &cache.q.row(i)[off..off + dh];
            for j in 0..len {
                if ds[j] == 0.0 {
                    continue;
                }
                let s = ds[j] * scale;
                let kj = &cache.k.row(j)[off..off + dh];
                let dqi = &mut dq.row_mut(i)[off..off + dh];
                for (d, kv) in dqi.iter_mut().zip(kj) {
                    *d += s * kv;
                }
                let dkj = &mut dk.row_mut(j)[off..off + dh];
                for (d, qv) in dkj.iter_mut().zip(qi) {
                    *d += s * qv;
                }
            }
        }
    }

    let mut dx = need_dx.then_some(dr1);
    linear_backward(&cache.x, &layer.wq, &dq, &mut grads.wq, Some(&mut grads.bq), dx.as_mut());
    linear_backward(&cache.x, &layer.wk, &dk, &mut grads.wk, None, dx.as_mut());
    linear_backward(&cache.x, &layer.wv, &dv, &mut grads.wv, Some(&mut grads.bv), dx.as_mut());
    dx
}

/// Backpropagates `d_out` (gradient w.r.t. the encoder output) into `grads`,
/// stopping below the depth `trainable` requires.
fn backward_sequence(
    params: &Params,
    cfg: &ModelConfig,
    cache: &SeqCache,
    d_out: Tensor,
    grads: &mut Params,
    trainable: Trainable,
) {
    let n = cfg.n_layers;
    let lowest = trainable.lowest_layer(n);
    let embeddings = trainable.embeddings(n);
    let mut d = d_out;
    for l in (lowest..n).rev() {
        let need_dx = l > lowest || embeddings;
        match layer_backward(&params.layers[l], cfg, &cache.layers[l], &d, &mut grads.layers[l], need_dx) {
            Some(dx) => d = dx,
            None => return,
        }
    }
    if !embeddings {
        return;
    }
    apply_mask(&mut d, &cache.emb_mask);
    for (i, &id) in cache.ids.iter().enumerate() {
        let row = d.row(i);
        for (acc, g) in grads.embeddings.token.row_mut(id).iter_mut().zip(row) {
            *acc += g;
        }
        for (acc, g) in grads.embeddings.position.row_mut(i).iter_mut().zip(row) {
            *acc += g;
        }
    }
}

/// Hidden rows feeding the head: masked positions for MLM, CLS for classification.
fn head_inputs(ex: &Example<'_>) -> Result<(Vec<usize>, Vec<usize>)> {
    match ex {
        Example::Mlm { ids, targets } => {
            let mut positions = Vec::with_capacity(targets.len());
            let mut labels = Vec::with_capacity(targets.len());
            for &(pos, id) in targets.iter() {
                if pos >= ids.len() {
                    return Err(ModelError::ShapeMismatch(format!("masked position {pos} beyond sequence")));
                }
                positions.push(pos);
                labels.push(id);
            }
            Ok((positions, labels))
        }
        Example::Classify { label, .. } => Ok((vec![0], vec![*label])),
    }
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::matrix(rows.len(), c, data)
}

fn check_examples(model: &Model, examples: &[Example<'_>]) -> Result<usize> {
    if examples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    for ex in examples {
        if ex.head() != model.head_kind() {
            return Err(ModelError::WrongHead { expected: ex.head(), found: model.head_kind() });
        }
    }
    Ok(examples.iter().map(Example::count).sum())
}

/// Sum of row-wise cross-entropies and the gradient (softmax − one-hot) * scale.
fn ce_rows(logits: &Tensor, targets: &[usize], scale: f64) -> Result<(f64, Tensor)> {
    let (mean, mut grad) = crate::numerics::cross_entropy(logits, targets)?;
    let rows = targets.len() as f64;
    grad.scale(rows * scale);
    Ok((mean * rows, grad))
}

pub(crate) fn loss_and_grad(
    model: &Model,
    examples: &[Example<'_>],
    dropout_seed: Option<u64>,
    trainable: Trainable,
) -> Result<(f64, Params)> {
    let total = check_examples(model, examples)?;
    let params = model.params();
    let cfg = model.config();
    let mut grads = params.zeros_like();
    if total == 0 {
        return Ok((0.0, grads));
    }
    let scale = 1.0 / total as f64;
    let mut loss = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        if ex.count() == 0 {
            continue;
        }
        let seed = dropout_seed.map(|s| example_seed(s, i));
        let cache = forward_sequence(params, cfg, ex.ids(), None, seed)?;
        let (positions, labels) = head_inputs(ex)?;
        let hidden = gather_rows(cache.output(), &positions);
        let logits = linear(&hidden, &params.head.weight, Some(&params.head.bias));
        let (ce, dlogits) = ce_rows(&logits, &labels, scale)?;
        loss += ce;

        let mut dhidden = hidden.zeros_like();
        linear_backward(&hidden, &params.head.weight, &dlogits, &mut grads.head.weight, Some(&mut grads.head.bias), Some(&mut dhidden));
        if trainable.depth > 1 {
            let mut d_out = cache.output().zeros_like();
            for (r, &pos) in positions.iter().enumerate() {
                for (acc, g) in d_out.row_mut(pos).iter_mut().zip(dhidden.row(r)) {
                    *acc += g;
                }
            }
            backward_sequence(params, cfg, &cache, d_out, &mut grads, trainable);
        }
    }
    Ok((loss * scale, grads))
}

pub(crate) fn loss_only(model: &Model, examples: &[Example<'_>], dropout_seed: Option<u64>) -> Result<f64> {
    let total = check_examples(model, examples)?;
    if total == 0 {
        return Ok(0.0);
    }
    let params = model.params();
    let mut loss = 0.0;
    for (i, ex) in examples.iter().enumerate() {
        if ex.count() == 0 {
            continue;
        }
        let seed = dropout_seed.map(|s| example_seed(s, i));
        let cache = forward_sequence(params, model.config(), ex.ids(), None, seed)?;
        let (positions, labels) = head_inputs(ex)?;
        let hidden = gather_rows(cache.output(), &positions);
        let logits = linear(&hidden, &params.head.weight, Some(&params.head.bias));
        loss += ce_rows(&logits, &labels, 1.0)?.0;
    }
    Ok(loss / total as f64)
}
