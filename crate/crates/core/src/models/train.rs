use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, ModelError, ModelKind, TrainedModel};
use crate::autodiff::{grad_check, AutodiffError, OptimizerState, ParamSet, Tape, Tensor, Var};
use crate::graph::ItemGraph;
use crate::preprocess::{FeatureMatrix, PreprocessedData};

/// Item sequences a model is trained on, plus catalog metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub n_items: usize,
    pub item_categories: Vec<usize>,
    pub sessions: Vec<Vec<usize>>,
}

impl TrainingSet {
    pub fn new(n_items: usize, item_categories: Vec<usize>, sessions: Vec<Vec<usize>>) -> Self {
        assert_eq!(item_categories.len(), n_items, "one category per item");
        assert!(sessions.iter().flatten().all(|&i| i < n_items), "session item outside catalog");
        TrainingSet { n_items, item_categories, sessions }
    }

    pub fn from_preprocessed(data: &PreprocessedData) -> Self {
        TrainingSet::new(data.n_items(), data.item_categories.clone(), data.split.train.iter().map(|s| s.items.clone()).collect())
    }

    pub fn seen_items(&self) -> BTreeSet<usize> {
        self.sessions.iter().flatten().copied().collect()
    }

    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(self.n_items as u64).to_le_bytes());
        for c in &self.item_categories {
            bytes.extend_from_slice(&(*c as u64).to_le_bytes());
        }
        for s in &self.sessions {
            bytes.extend_from_slice(&(s.len() as u64).to_le_bytes());
            for i in s {
                bytes.extend_from_slice(&(*i as u64).to_le_bytes());
            }
        }
        crate::util::sha256_hex(&bytes)
    }
}

/// One trainable model family: examples, batches and the loss over bound parameters.
pub(super) trait Architecture {
    type Batch;

    fn n_examples(&self) -> usize;

    fn full_batch(&self) -> bool {
        false
    }

    /// Draws any randomness the loss needs (negatives, masks, dropout seeds).
    fn make_batch(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Self::Batch;

    fn loss(&self, tape: &mut Tape, p: &[Var], batch: &Self::Batch) -> Result<Var, AutodiffError>;
}

/// Runs `config.epochs` epochs of shuffled mini-batch training; returns the per-epoch mean loss.
pub(super) fn train<A: Architecture>(arch: &A, config: &ModelConfig, params: &mut ParamSet, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, ModelError> {
    let n = arch.n_examples();
    if n == 0 {
        return Err(ModelError::EmptyTrainingSet);
    }
    let bs = if arch.full_batch() { n } else { config.batch };
    let mut opt = OptimizerState::new();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let diverged = |e: AutodiffError| ModelError::DivergedLoss { epoch, detail: e.to_string() };
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let batch = arch.make_batch(chunk, rng);
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape)?;
            let loss = arch.loss(&mut tape, &vars, &batch).map_err(diverged)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(ModelError::DivergedLoss { epoch, detail: format!("loss {value}") });
            }
            let grads = tape.backward(loss).map_err(diverged)?;
            params.load_grads(&vars, &grads);
            opt.step(config.optimizer, params, config.lr).map_err(diverged)?;
            total += value * chunk.len() as f64;
        }
        let mean = total / n as f64;
        log::debug!("{} epoch {epoch}: loss {mean:.6}", config.kind);
        log.push(mean);
    }
    Ok(log)
}

pub(super) fn finish(config: &ModelConfig, set: &TrainingSet, mut params: ParamSet, item_embeddings: FeatureMatrix, log: Vec<f64>) -> TrainedModel {
    for t in params.tensors_mut() {
        t.grad = None;
    }
    TrainedModel {
        config: config.clone(),
        n_items: set.n_items,
        params,
        item_embeddings,
        cold_items: BTreeSet::new(),
        training_log: log,
        data_fingerprint: set.fingerprint(),
    }
}

/// Gradient check of one training batch's loss with respect to every parameter.
pub(super) fn check_architecture<A: Architecture>(arch: &A, params: &ParamSet, rng: &mut ChaCha8Rng, batch_size: usize, eps: f64) -> Result<f64, ModelError> {
    let n = arch.n_examples();
    if n == 0 {
        return Err(ModelError::EmptyTrainingSet);
    }
    let idx: Vec<usize> = (0..n.min(batch_size)).collect();
    let batch = arch.make_batch(&idx, rng);
    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape.clone()).collect();
    let flat = Tensor::new(vec![params.num_values()], params.flatten())?;
    let total = flat.len();
    let f = |tape: &mut Tape, x: Var| -> Result<Var, AutodiffError> {
        let row = tape.reshape(x, &[1, total])?;
        let mut vars = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for shape in &shapes {
            let len: usize = shape.iter().product();
            let piece = tape.slice_cols(row, off, off + len)?;
            vars.push(tape.reshape(piece, shape)?);
            off += len;
        }
        arch.loss(tape, &vars, &batch)
    };
    Ok(grad_check(f, &flat, eps)?)
}

/// Max relative error between the analytic and finite-difference gradient of
/// the training loss at the seeded initialisation, over a small batch.
pub fn loss_grad_check(config: &ModelConfig, set: &TrainingSet, g: Option<&ItemGraph>, eps: f64) -> Result<f64, ModelError> {
    config.validate()?;
    let owned;
    let graph = match g {
        Some(g) => g,
        None => {
            owned = set.graph();
            &owned
        }
    };
    match config.kind {
        ModelKind::Cnn => super::cnn::grad_check(config, set, eps),
        ModelKind::Rnn => super::rnn::grad_check(config, set, eps),
        ModelKind::Gnn => super::gnn::grad_check(config, set, graph, eps),
        ModelKind::Autoencoder => super::autoencoder::grad_check(config, set, eps),
        ModelKind::Transformer => super::transformer::grad_check(config, set, eps),
        ModelKind::Ncf => super::ncf::grad_check(config, set, eps),
        ModelKind::Siamese => super::siamese::grad_check(config, set, graph, eps),
    }
}
