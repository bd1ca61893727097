//! One encoder block (masked multi-head self-attention, feed-forward, residuals
//! and layer norms) over the context, mean-pooled over real positions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    bind_constants, dense, glorot, layer_norm, one_hot, positional_encoding, prefix_examples, table_rows, tied_logits, ITEM_TABLE,
};
use super::train::{check_architecture, finish, train, Architecture, TrainingSet};
use super::{ModelConfig, ModelError, ModelKind, RecContext, TrainedModel};
use crate::autodiff::{AutodiffError, ParamSet, Tape, Tensor, Var};

const MASKED: f64 = -1e9;

fn init(cfg: &ModelConfig, n_items: usize, rng: &mut ChaCha8Rng) -> ParamSet {
    let (d, h) = (cfg.embed_dim, cfg.hidden_dim);
    let mut p = ParamSet::new();
    p.insert(ITEM_TABLE, glorot(rng, n_items + 1, d));
    for name in ["wq", "wk", "wv", "wo"] {
        p.insert(name, glorot(rng, d, d));
    }
    p.insert("ln1_gain", Tensor::filled(&[d], 1.0));
    p.insert("ln1_shift", Tensor::zeros(&[d]));
    p.insert("ff_w1", glorot(rng, d, h));
    p.insert("ff_b1", Tensor::zeros(&[h]));
    p.insert("ff_w2", glorot(rng, h, d));
    p.insert("ff_b2", Tensor::zeros(&[d]));
    p.insert("ln2_gain", Tensor::filled(&[d], 1.0));
    p.insert("ln2_shift", Tensor::zeros(&[d]));
    p.insert("head_w", glorot(rng, d, d));
    p.insert("head_b", Tensor::zeros(&[d]));
    p.insert("output_bias", Tensor::zeros(&[n_items]));
    p
}

/// `[B·L, d]` → `[B·heads, L, d/heads]`.
fn split_heads(tape: &mut Tape, x: Var, bsz: usize, len: usize, heads: usize, dk: usize) -> Result<Var, AutodiffError> {
    let x = tape.reshape(x, &[bsz, len, heads, dk])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[bsz * heads, len, dk])
}

struct Encoded {
    pooled: Var,
    attention: Var,
}

/// Encodes left-padded `B × max_len` indices; `pad` marks padding.
fn encode(tape: &mut Tape, p: &[Var], cfg: &ModelConfig, idx: &[usize], pad: usize) -> Result<Encoded, AutodiffError> {
    let &[table, wq, wk, wv, wo, g1, s1, w1, b1, w2, b2, g2, s2, ..] = p else {
        return Err(AutodiffError::ShapeMismatch("transformer expects 16 parameters".into()));
    };
    let (len, d, heads) = (cfg.max_len, cfg.embed_dim, cfg.heads);
    let dk = d / heads;
    let bsz = idx.len() / len;

    let mut x = tape.gather(table, idx)?;
    if cfg.positional_encoding {
        let pe = tape.constant(Tensor::new(vec![len, d], positional_encoding(len, d))?)?;
        let x3 = tape.reshape(x, &[bsz, len, d])?;
        let x3 = tape.add(x3, pe)?;
        x = tape.reshape(x3, &[bsz * len, d])?;
    }

    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let (q, k, v) = (
        split_heads(tape, q, bsz, len, heads, dk)?,
        split_heads(tape, k, bsz, len, heads, dk)?,
        split_heads(tape, v, bsz, len, heads, dk)?,
    );
    let scores = tape.batch_matmul_bt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let mut mask = Vec::with_capacity(bsz * heads * len * len);
    for b in 0..bsz {
        let row: Vec<f64> = (0..len).map(|j| if idx[b * len + j] == pad { MASKED } else { 0.0 }).collect();
        for _ in 0..heads * len {
            mask.extend_from_slice(&row);
        }
    }
    let mask = tape.constant(Tensor::new(vec![bsz * heads, len, len], mask)?)?;
    let scores = tape.add(scores, mask)?;
    let attention = tape.softmax_rows(scores)?;
    let ctx = tape.batch_matmul(attention, v)?;
    let ctx = tape.reshape(ctx, &[bsz, heads, len, dk])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[bsz * len, d])?;
    let attn_out = tape.matmul(ctx, wo)?;

    let r1 = tape.add(x, attn_out)?;
    let x1 = layer_norm(tape, r1, g1, s1)?;
    let f = dense(tape, x1, w1, b1)?;
    let f = tape.relu(f)?;
    let f = dense(tape, f, w2, b2)?;
    let r2 = tape.add(x1, f)?;
    let x2 = layer_norm(tape, r2, g2, s2)?;

    let groups: Vec<Vec<(usize, f64)>> = (0..bsz)
        .map(|b| {
            let real: Vec<usize> = (0..len).filter(|&j| idx[b * len + j] != pad).collect();
            let w = 1.0 / real.len() as f64;
            real.into_iter().map(|j| (b * len + j, w)).collect()
        })
        .collect();
    let pooled = tape.row_combine(x2, groups)?;
    Ok(Encoded { pooled, attention })
}

fn logits(tape: &mut Tape, p: &[Var], pooled: Var, n_items: usize) -> Result<Var, AutodiffError> {
    let h = dense(tape, pooled, p[13], p[14])?;
    tied_logits(tape, h, p[0], p[15], n_items)
}

pub(super) struct Batch {
    idx: Vec<usize>,
    targets: Vec<usize>,
}

struct Transformer<'a> {
    cfg: &'a ModelConfig,
    n_items: usize,
    examples: Vec<(RecContext, usize)>,
}

impl<'a> Transformer<'a> {
    fn new(cfg: &'a ModelConfig, set: &TrainingSet) -> Self {
        let examples = prefix_examples(&set.sessions, cfg.max_len)
            .into_iter()
            .map(|(c, t)| (RecContext { items: c }, t))
            .collect();
        Transformer { cfg, n_items: set.n_items, examples }
    }
}

impl Architecture for Transformer<'_> {
    type Batch = Batch;

    fn n_examples(&self) -> usize {
        self.examples.len()
    }

    fn make_batch(&self, idx: &[usize], _rng: &mut ChaCha8Rng) -> Batch {
        Batch {
            idx: idx.iter().flat_map(|&e| self.examples[e].0.padded(self.cfg.max_len, self.n_items)).collect(),
            targets: idx.iter().map(|&e| self.examples[e].1).collect(),
        }
    }

    fn loss(&self, tape: &mut Tape, p: &[Var], batch: &Batch) -> Result<Var, AutodiffError> {
        let enc = encode(tape, p, self.cfg, &batch.idx, self.n_items)?;
        let l = logits(tape, p, enc.pooled, self.n_items)?;
        tape.softmax_cross_entropy(l, one_hot(&batch.targets, self.n_items))
    }
}

pub(super) fn fit(cfg: &ModelConfig, set: &TrainingSet) -> Result<TrainedModel, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init(cfg, set.n_items, &mut rng);
    let log = train(&Transformer::new(cfg, set), cfg, &mut params, &mut rng)?;
    let emb = table_rows(params.get(ITEM_TABLE).expect("table"), set.n_items);
    Ok(finish(cfg, set, params, emb, log))
}

pub(super) fn grad_check(cfg: &ModelConfig, set: &TrainingSet, eps: f64) -> Result<f64, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init(cfg, set.n_items, &mut rng);
    check_architecture(&Transformer::new(cfg, set), &params, &mut rng, 3, eps)
}

pub(super) fn score(model: &TrainedModel, ctx: &RecContext) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let p = bind_constants(&mut tape, &model.params)?;
    let idx = ctx.padded(model.config.max_len, model.n_items);
    let enc = encode(&mut tape, &p, &model.config, &idx, model.n_items)?;
    let l = logits(&mut tape, &p, enc.pooled, model.n_items)?;
    Ok(tape.value(l).data.clone())
}

/// Attention weights for `ctx` as `[head][query][key]` over the context positions
/// (padding dropped; padded keys carry no weight).
pub fn attention_weights(model: &TrainedModel, ctx: &RecContext) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
    if model.kind() != ModelKind::Transformer {
        return Err(ModelError::KindMismatch { expected: ModelKind::Transformer, found: model.kind() });
    }
    let mut tape = Tape::new();
    let p = bind_constants(&mut tape, &model.params)?;
    let idx = ctx.padded(model.config.max_len, model.n_items);
    let enc = encode(&mut tape, &p, &model.config, &idx, model.n_items)?;
    let len = model.config.max_len;
    let start = len - ctx.items.len().min(len);
    let a = &tape.value(enc.attention).data;
    Ok((0..model.config.heads)
        .map(|h| (start..len).map(|i| a[(h * len + i) * len + start..(h * len + i + 1) * len].to_vec()).collect())
        .collect())
}
