//! Neural collaborative filtering with the session context standing in for the
//! user: a GMF branch (elementwise product) and a two-layer MLP branch over the
//! concatenated context and candidate embeddings, combined by a dense layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{bind_constants, dense, glorot, mean_groups, prefix_examples, sample_negatives, table_rows, ITEM_TABLE};
use super::train::{check_architecture, finish, train, Architecture, TrainingSet};
use super::{ModelConfig, ModelError, RecContext, TrainedModel};
use crate::autodiff::{AutodiffError, ParamSet, Tape, Tensor, Var};

fn init(cfg: &ModelConfig, n_items: usize, rng: &mut ChaCha8Rng) -> ParamSet {
    let (d, h) = (cfg.embed_dim, cfg.hidden_dim);
    let h2 = (h / 2).max(1);
    let mut p = ParamSet::new();
    p.insert(ITEM_TABLE, glorot(rng, n_items, d));
    p.insert("gmf_w", glorot(rng, d, 1));
    p.insert("gmf_b", Tensor::zeros(&[1]));
    p.insert("mlp_w1", glorot(rng, 2 * d, h));
    p.insert("mlp_b1", Tensor::zeros(&[h]));
    p.insert("mlp_w2", glorot(rng, h, h2));
    p.insert("mlp_b2", Tensor::zeros(&[h2]));
    p.insert("out_w", glorot(rng, 1 + h2, 1));
    p.insert("out_b", Tensor::zeros(&[1]));
    p
}

fn gmf(tape: &mut Tape, p: &[Var], c: Var, e: Var) -> Result<Var, AutodiffError> {
    let prod = tape.mul(c, e)?;
    dense(tape, prod, p[1], p[2])
}

/// Logits for aligned rows of context vectors `c` and candidate embeddings `e`.
fn forward(tape: &mut Tape, p: &[Var], c: Var, e: Var) -> Result<Var, AutodiffError> {
    let rows = tape.shape(c)[0];
    let g = gmf(tape, p, c, e)?;
    let ce = tape.concat_cols(c, e)?;
    let m = dense(tape, ce, p[3], p[4])?;
    let m = tape.relu(m)?;
    let m = dense(tape, m, p[5], p[6])?;
    let m = tape.relu(m)?;
    let both = tape.concat_cols(g, m)?;
    let out = dense(tape, both, p[7], p[8])?;
    tape.reshape(out, &[rows])
}

pub(super) struct Batch {
    contexts: Vec<Vec<usize>>,
    pairs: Vec<(usize, usize, f64)>,
}

struct Ncf<'a> {
    cfg: &'a ModelConfig,
    n_items: usize,
    examples: Vec<(Vec<usize>, usize)>,
}

impl Architecture for Ncf<'_> {
    type Batch = Batch;

    fn n_examples(&self) -> usize {
        self.examples.len()
    }

    fn make_batch(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Batch {
        let mut contexts = Vec::with_capacity(idx.len());
        let mut pairs = Vec::with_capacity(idx.len() * (1 + self.cfg.neg_samples));
        for (row, &e) in idx.iter().enumerate() {
            let (ctx, target) = &self.examples[e];
            pairs.push((row, *target, 1.0));
            let mut exclude = ctx.clone();
            exclude.push(*target);
            for j in sample_negatives(rng, self.n_items, &exclude, self.cfg.neg_samples) {
                pairs.push((row, j, 0.0));
            }
            contexts.push(ctx.clone());
        }
        Batch { contexts, pairs }
    }

    fn loss(&self, tape: &mut Tape, p: &[Var], batch: &Batch) -> Result<Var, AutodiffError> {
        let ctx = tape.row_combine(p[0], mean_groups(batch.contexts.iter().map(Vec::as_slice)))?;
        let rows: Vec<usize> = batch.pairs.iter().map(|q| q.0).collect();
        let cands: Vec<usize> = batch.pairs.iter().map(|q| q.1).collect();
        let c = tape.gather(ctx, &rows)?;
        let e = tape.gather(p[0], &cands)?;
        let logits = forward(tape, p, c, e)?;
        tape.bce_with_logits(logits, batch.pairs.iter().map(|q| q.2).collect())
    }
}

fn arch<'a>(cfg: &'a ModelConfig, set: &TrainingSet) -> Ncf<'a> {
    Ncf { cfg, n_items: set.n_items, examples: prefix_examples(&set.sessions, cfg.max_len) }
}

pub(super) fn fit(cfg: &ModelConfig, set: &TrainingSet) -> Result<TrainedModel, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init(cfg, set.n_items, &mut rng);
    let log = train(&arch(cfg, set), cfg, &mut params, &mut rng)?;
    let emb = table_rows(params.get(ITEM_TABLE).expect("table"), set.n_items);
    Ok(finish(cfg, set, params, emb, log))
}

pub(super) fn grad_check(cfg: &ModelConfig, set: &TrainingSet, eps: f64) -> Result<f64, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init(cfg, set.n_items, &mut rng);
    check_architecture(&arch(cfg, set), &params, &mut rng, 4, eps)
}

fn candidates(tape: &mut Tape, p: &[Var], context: &[f64], n_items: usize) -> Result<(Var, Var), AutodiffError> {
    let c = tape.constant(Tensor::new(vec![1, context.len()], context.to_vec())?)?;
    let c = tape.gather(c, &vec![0; n_items])?;
    let all: Vec<usize> = (0..n_items).collect();
    let e = tape.gather(p[0], &all)?;
    Ok((c, e))
}

fn context_vector(model: &TrainedModel, ctx: &RecContext) -> Vec<f64> {
    let t = model.params.get(ITEM_TABLE).expect("table");
    let d = t.shape[1];
    let mut c = vec![0.0; d];
    for &i in &ctx.items {
        for (cv, v) in c.iter_mut().zip(&t.data[i * d..(i + 1) * d]) {
            *cv += v / ctx.items.len() as f64;
        }
    }
    c
}

pub(super) fn score(model: &TrainedModel, ctx: &RecContext) -> Result<Vec<f64>, ModelError> {
    score_context(model, &context_vector(model, ctx))
}

pub(super) fn score_context(model: &TrainedModel, context: &[f64]) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let p = bind_constants(&mut tape, &model.params)?;
    let (c, e) = candidates(&mut tape, &p, context, model.n_items)?;
    let logits = forward(&mut tape, &p, c, e)?;
    Ok(tape.value(logits).data.clone())
}

/// Output of the GMF branch alone for every candidate.
pub(super) fn gmf_branch(model: &TrainedModel, context: &[f64]) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let p = bind_constants(&mut tape, &model.params)?;
    let (c, e) = candidates(&mut tape, &p, context, model.n_items)?;
    let g = gmf(&mut tape, &p, c, e)?;
    Ok(tape.value(g).data.clone())
}
