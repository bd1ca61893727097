//! Shared-weight encoder mapping items to unit vectors, trained with a margin
//! contrastive loss on co-occurring (positive) and non-co-occurring (negative) pairs.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{bind_constants, dense, glorot};
use super::train::{check_architecture, finish, train, Architecture, TrainingSet};
use super::{ModelConfig, ModelError, RecContext, TrainedModel};
use crate::autodiff::{AutodiffError, ParamSet, Tape, Tensor, Var};
use crate::graph::ItemGraph;
use crate::preprocess::FeatureMatrix;

const MAX_REJECTIONS: usize = 100;

fn init(cfg: &ModelConfig, n_items: usize, rng: &mut ChaCha8Rng) -> ParamSet {
    let (d, h) = (cfg.embed_dim, cfg.hidden_dim);
    let mut p = ParamSet::new();
    p.insert("input_table", glorot(rng, n_items, d));
    p.insert("enc_w1", glorot(rng, d, h));
    p.insert("enc_b1", Tensor::zeros(&[h]));
    p.insert("enc_w2", glorot(rng, h, d));
    p.insert("enc_b2", Tensor::zeros(&[d]));
    p
}

fn encode(tape: &mut Tape, p: &[Var], items: &[usize]) -> Result<Var, AutodiffError> {
    let x = tape.gather(p[0], items)?;
    let h = dense(tape, x, p[1], p[2])?;
    let h = tape.relu(h)?;
    let y = dense(tape, h, p[3], p[4])?;
    tape.l2_normalize_rows(y)
}

pub(super) struct Batch {
    left: Vec<usize>,
    right: Vec<usize>,
    positive: Vec<f64>,
}

struct Siamese<'a> {
    cfg: &'a ModelConfig,
    n_items: usize,
    g: &'a ItemGraph,
    edges: Vec<(usize, usize)>,
    sampler: Option<WeightedIndex<f64>>,
    epoch_size: usize,
}

impl<'a> Siamese<'a> {
    fn new(cfg: &'a ModelConfig, set: &TrainingSet, g: &'a ItemGraph) -> Self {
        let edges: Vec<(usize, usize)> = g.edges().filter(|&(i, j, _)| i < set.n_items && j < set.n_items).map(|(i, j, _)| (i, j)).collect();
        let weights: Vec<f64> = edges.iter().map(|&(i, j)| g.weight(i, j)).collect();
        let sampler = WeightedIndex::new(&weights).ok();
        let epoch_size = if sampler.is_some() { set.sessions.iter().map(|s| s.len().saturating_sub(1)).sum() } else { 0 };
        Siamese { cfg, n_items: set.n_items, g, edges, sampler, epoch_size }
    }

    fn negative(&self, anchor: usize, rng: &mut ChaCha8Rng) -> usize {
        let mut j = rng.gen_range(0..self.n_items);
        for _ in 0..MAX_REJECTIONS {
            if j != anchor && self.g.weight(anchor, j) == 0.0 {
                break;
            }
            j = rng.gen_range(0..self.n_items);
        }
        j
    }
}

impl Architecture for Siamese<'_> {
    type Batch = Batch;

    fn n_examples(&self) -> usize {
        self.epoch_size
    }

    fn make_batch(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Batch {
        let sampler = self.sampler.as_ref().expect("positive pairs exist");
        let mut b = Batch { left: Vec::new(), right: Vec::new(), positive: Vec::new() };
        for _ in idx {
            let (mut i, mut j) = self.edges[sampler.sample(rng)];
            if rng.gen::<bool>() {
                std::mem::swap(&mut i, &mut j);
            }
            b.left.push(i);
            b.right.push(j);
            b.positive.push(1.0);
            for _ in 0..self.cfg.neg_samples {
                b.left.push(i);
                b.right.push(self.negative(i, rng));
                b.positive.push(0.0);
            }
        }
        b
    }

    fn loss(&self, tape: &mut Tape, p: &[Var], batch: &Batch) -> Result<Var, AutodiffError> {
        let a = encode(tape, p, &batch.left)?;
        let b = encode(tape, p, &batch.right)?;
        let cos = tape.row_dot(a, b)?;
        let pull = tape.affine(cos, -1.0, 1.0)?;
        let pull = tape.mul(pull, pull)?;
        let pull = tape.mul_const(pull, batch.positive.clone())?;
        let push = tape.affine(cos, 1.0, -self.cfg.margin)?;
        let push = tape.relu(push)?;
        let push = tape.mul(push, push)?;
        let push = tape.mul_const(push, batch.positive.iter().map(|y| 1.0 - y).collect())?;
        let total = tape.add(pull, push)?;
        tape.mean_all(total)
    }
}

fn encoded_items(params: &ParamSet, n_items: usize) -> Result<FeatureMatrix, AutodiffError> {
    let mut tape = Tape::new();
    let p = bind_constants(&mut tape, params)?;
    let all: Vec<usize> = (0..n_items).collect();
    let f = encode(&mut tape, &p, &all)?;
    let t = tape.value(f);
    Ok(FeatureMatrix { rows: n_items, cols: t.shape[1], data: t.data.clone() })
}

pub(super) fn fit(cfg: &ModelConfig, set: &TrainingSet, g: &ItemGraph) -> Result<TrainedModel, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init(cfg, set.n_items, &mut rng);
    let log = train(&Siamese::new(cfg, set, g), cfg, &mut params, &mut rng)?;
    let f = encoded_items(&params, set.n_items)?;
    Ok(finish(cfg, set, params, f, log))
}

pub(super) fn grad_check(cfg: &ModelConfig, set: &TrainingSet, g: &ItemGraph, eps: f64) -> Result<f64, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init(cfg, set.n_items, &mut rng);
    check_architecture(&Siamese::new(cfg, set, g), &params, &mut rng, 4, eps)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
    }
}

/// Cosine between the anchor's encoding and every item's.
pub(super) fn score(model: &TrainedModel, ctx: &RecContext) -> Vec<f64> {
    let f = &model.item_embeddings;
    let a = f.row(ctx.anchor());
    (0..f.rows).map(|j| cosine(a, f.row(j))).collect()
}
