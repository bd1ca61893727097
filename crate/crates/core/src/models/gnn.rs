//! Weighted-mean message passing over the co-occurrence graph. Each layer
//! replaces an embedding by the mean of itself (weight 1) and its neighbours
//! (weights w_ij); the base embeddings are the only parameters.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{glorot, mean_groups, prefix_examples, sample_negatives};
use super::train::{check_architecture, finish, train, Architecture, TrainingSet};
use super::{ModelConfig, ModelError, RecContext, TrainedModel};
use crate::autodiff::{AutodiffError, Csr, ParamSet, Tape, Var};
use crate::graph::ItemGraph;
use crate::preprocess::FeatureMatrix;

const BASE: &str = "base_embedding";

/// Row-normalised `W + I` over items `0..n_items`; items outside the graph keep only the self loop.
pub fn propagation_matrix(g: &ItemGraph, n_items: usize) -> Csr {
    let mut indptr = vec![0];
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for i in 0..n_items {
        let mut row: Vec<(usize, f64)> = g.adjacency(i).iter().copied().filter(|&(j, _)| j < n_items).collect();
        row.push((i, 1.0));
        row.sort_by_key(|e| e.0);
        let total: f64 = row.iter().map(|e| e.1).sum();
        for (j, w) in row {
            indices.push(j);
            values.push(w / total);
        }
        indptr.push(indices.len());
    }
    Csr { n_rows: n_items, n_cols: n_items, indptr, indices, values }
}

fn propagate(tape: &mut Tape, a: &Arc<Csr>, base: Var, layers: usize) -> Result<Var, AutodiffError> {
    let mut z = base;
    for _ in 0..layers {
        z = tape.spmm(a.clone(), z)?;
    }
    Ok(z)
}

/// Propagated embeddings without recording a tape.
pub(super) fn propagated(a: &Csr, base: &FeatureMatrix, layers: usize) -> FeatureMatrix {
    let mut data = base.data.clone();
    for _ in 0..layers {
        data = a.matmul_dense(&data, base.cols);
    }
    FeatureMatrix { rows: base.rows, cols: base.cols, data }
}

pub(super) struct Batch {
    contexts: Vec<Vec<usize>>,
    /// (context row, candidate, label)
    pairs: Vec<(usize, usize, f64)>,
}

struct Gnn<'a> {
    cfg: &'a ModelConfig,
    n_items: usize,
    a: Arc<Csr>,
    examples: Vec<(Vec<usize>, usize)>,
}

impl Architecture for Gnn<'_> {
    type Batch = Batch;

    fn n_examples(&self) -> usize {
        self.examples.len()
    }

    fn full_batch(&self) -> bool {
        true
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
        let z = propagate(tape, &self.a, p[0], self.cfg.layers)?;
        let ctx = tape.row_combine(z, mean_groups(batch.contexts.iter().map(Vec::as_slice)))?;
        let rows: Vec<usize> = batch.pairs.iter().map(|p| p.0).collect();
        let cands: Vec<usize> = batch.pairs.iter().map(|p| p.1).collect();
        let left = tape.gather(ctx, &rows)?;
        let right = tape.gather(z, &cands)?;
        let logits = tape.row_dot(left, right)?;
        tape.bce_with_logits(logits, batch.pairs.iter().map(|p| p.2).collect())
    }
}

fn init(cfg: &ModelConfig, n_items: usize, rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert(BASE, glorot(rng, n_items, cfg.embed_dim));
    p
}

fn arch<'a>(cfg: &'a ModelConfig, set: &TrainingSet, g: &ItemGraph) -> Gnn<'a> {
    Gnn {
        cfg,
        n_items: set.n_items,
        a: Arc::new(propagation_matrix(g, set.n_items)),
        examples: prefix_examples(&set.sessions, cfg.max_len),
    }
}

pub(super) fn fit(cfg: &ModelConfig, set: &TrainingSet, g: &ItemGraph) -> Result<TrainedModel, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init(cfg, set.n_items, &mut rng);
    let arch = arch(cfg, set, g);
    let log = train(&arch, cfg, &mut params, &mut rng)?;
    let t = params.get(BASE).expect("base");
    let base = FeatureMatrix { rows: set.n_items, cols: cfg.embed_dim, data: t.data.clone() };
    let z = propagated(&arch.a, &base, cfg.layers);
    Ok(finish(cfg, set, params, z, log))
}

pub(super) fn grad_check(cfg: &ModelConfig, set: &TrainingSet, g: &ItemGraph, eps: f64) -> Result<f64, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init(cfg, set.n_items, &mut rng);
    check_architecture(&arch(cfg, set, g), &params, &mut rng, 4, eps)
}

/// `score(j) = ⟨mean of Z over the context, Z_j⟩`.
pub(super) fn score(model: &TrainedModel, ctx: &RecContext) -> Vec<f64> {
    let z = &model.item_embeddings;
    let mut mean = vec![0.0; z.cols];
    for &i in &ctx.items {
        for (m, v) in mean.iter_mut().zip(z.row(i)) {
            *m += v / ctx.items.len() as f64;
        }
    }
    (0..z.rows).map(|j| z.row(j).iter().zip(&mean).map(|(a, b)| a * b).sum()).collect()
}
