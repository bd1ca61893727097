//! Convolution over the stacked context embeddings (`max_len × embed_dim`,
//! one channel), max-pooling, dense projection and a tied output layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{bind_constants, dense, glorot, one_hot, prefix_examples, table_rows, tied_logits, ITEM_TABLE};
use super::train::{check_architecture, finish, train, Architecture, TrainingSet};
use super::{ModelConfig, ModelError, RecContext, TrainedModel};
use crate::autodiff::{dropout, AutodiffError, ConvSpec, ParamSet, Tape, Tensor, Var};

const KERNEL: usize = 3;
const POOL: (usize, usize) = (2, 2);

fn pooled_width(cfg: &ModelConfig) -> usize {
    ((cfg.max_len - KERNEL + 1) / POOL.0) * ((cfg.embed_dim - KERNEL + 1) / POOL.1) * cfg.conv_filters
}

fn init(cfg: &ModelConfig, n_items: usize, rng: &mut ChaCha8Rng) -> ParamSet {
    let (d, f) = (cfg.embed_dim, cfg.conv_filters);
    let mut p = ParamSet::new();
    p.insert(ITEM_TABLE, glorot(rng, n_items + 1, d));
    p.insert("conv_kernel", Tensor::glorot(&[KERNEL, KERNEL, 1, f], KERNEL * KERNEL, KERNEL * KERNEL * f, rng));
    p.insert("conv_bias", Tensor::zeros(&[f]));
    p.insert("dense_w", glorot(rng, pooled_width(cfg), d));
    p.insert("dense_b", Tensor::zeros(&[d]));
    p.insert("output_bias", Tensor::zeros(&[n_items]));
    p
}

/// Context representation `B × embed_dim` from left-padded `B × max_len` indices.
fn encode(tape: &mut Tape, p: &[Var], cfg: &ModelConfig, idx: &[usize], training: bool, seed: u64) -> Result<Var, AutodiffError> {
    let &[table, kernel, cbias, w, b, _] = p else {
        return Err(AutodiffError::ShapeMismatch("cnn expects 6 parameters".into()));
    };
    let bsz = idx.len() / cfg.max_len;
    let x = tape.gather(table, idx)?;
    let x = tape.reshape(x, &[bsz, cfg.max_len, cfg.embed_dim, 1])?;
    let c = tape.conv2d_maxpool(x, kernel, ConvSpec { stride: 1, pool: POOL })?;
    let c = tape.add(c, cbias)?;
    let c = tape.relu(c)?;
    let c = tape.reshape(c, &[bsz, pooled_width(cfg)])?;
    let c = dropout(tape, c, cfg.dropout, training, seed)?;
    dense(tape, c, w, b)
}

pub(super) struct Batch {
    idx: Vec<usize>,
    targets: Vec<usize>,
    seed: u64,
}

struct Cnn<'a> {
    cfg: &'a ModelConfig,
    n_items: usize,
    examples: Vec<(RecContext, usize)>,
}

impl<'a> Cnn<'a> {
    fn new(cfg: &'a ModelConfig, set: &TrainingSet) -> Self {
        let examples = prefix_examples(&set.sessions, cfg.max_len)
            .into_iter()
            .map(|(c, t)| (RecContext { items: c }, t))
            .collect();
        Cnn { cfg, n_items: set.n_items, examples }
    }
}

impl Architecture for Cnn<'_> {
    type Batch = Batch;

    fn n_examples(&self) -> usize {
        self.examples.len()
    }

    fn make_batch(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Batch {
        Batch {
            idx: idx.iter().flat_map(|&e| self.examples[e].0.padded(self.cfg.max_len, self.n_items)).collect(),
            targets: idx.iter().map(|&e| self.examples[e].1).collect(),
            seed: rng.gen(),
        }
    }

    fn loss(&self, tape: &mut Tape, p: &[Var], batch: &Batch) -> Result<Var, AutodiffError> {
        let h = encode(tape, p, self.cfg, &batch.idx, true, batch.seed)?;
        let logits = tied_logits(tape, h, p[0], p[5], self.n_items)?;
        tape.softmax_cross_entropy(logits, one_hot(&batch.targets, self.n_items))
    }
}

pub(super) fn fit(cfg: &ModelConfig, set: &TrainingSet) -> Result<TrainedModel, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init(cfg, set.n_items, &mut rng);
    let log = train(&Cnn::new(cfg, set), cfg, &mut params, &mut rng)?;
    let emb = table_rows(params.get(ITEM_TABLE).expect("table"), set.n_items);
    Ok(finish(cfg, set, params, emb, log))
}

pub(super) fn grad_check(cfg: &ModelConfig, set: &TrainingSet, eps: f64) -> Result<f64, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init(cfg, set.n_items, &mut rng);
    check_architecture(&Cnn::new(cfg, set), &params, &mut rng, 4, eps)
}

pub(super) fn score(model: &TrainedModel, ctx: &RecContext) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let p = bind_constants(&mut tape, &model.params)?;
    let idx = ctx.padded(model.config.max_len, model.n_items);
    let h = encode(&mut tape, &p, &model.config, &idx, false, 0)?;
    let logits = tied_logits(&mut tape, h, p[0], p[5], model.n_items)?;
    Ok(tape.value(logits).data.clone())
}
