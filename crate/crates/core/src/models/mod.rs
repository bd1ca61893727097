//! Seven item-item recommenders behind one fit / score / embed interface.

mod autoencoder;
mod cnn;
mod gnn;
mod layers;
mod ncf;
mod rnn;
mod siamese;
mod train;
mod transformer;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{read_checkpoint, write_checkpoint, AutodiffError, OptimizerKind, ParamSet, Tensor};
use crate::graph::{GraphConfig, ItemGraph};
use crate::ingest::Session;
use crate::metrics::RankedList;
use crate::preprocess::{FeatureMatrix, PreprocessedData};

pub use gnn::propagation_matrix;
pub use train::{loss_grad_check, TrainingSet};
pub use transformer::attention_weights;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("no usable training examples")]
    EmptyTrainingSet,
    #[error("loss diverged in epoch {epoch}: {detail}")]
    DivergedLoss { epoch: usize, detail: String },
    #[error("model is {found}, expected {expected}")]
    KindMismatch { expected: ModelKind, found: ModelKind },
    #[error("unknown item {0}")]
    UnknownItem(usize),
    #[error("k = {k} outside 1..={n_items}")]
    InvalidK { k: usize, n_items: usize },
    #[error("empty context")]
    EmptyContext,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Cnn,
    Rnn,
    Gnn,
    Autoencoder,
    Transformer,
    Ncf,
    Siamese,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Cnn,
        ModelKind::Rnn,
        ModelKind::Gnn,
        ModelKind::Autoencoder,
        ModelKind::Transformer,
        ModelKind::Ncf,
        ModelKind::Siamese,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Cnn => "cnn",
            ModelKind::Rnn => "rnn",
            ModelKind::Gnn => "gnn",
            ModelKind::Autoencoder => "autoencoder",
            ModelKind::Transformer => "transformer",
            ModelKind::Ncf => "ncf",
            ModelKind::Siamese => "siamese",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| ModelError::InvalidConfig(format!("unknown model kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub max_len: usize,
    pub dropout: f64,
    pub heads: usize,
    pub layers: usize,
    pub bottleneck: usize,
    pub margin: f64,
    pub neg_samples: usize,
    pub input_mask_rate: f64,
    pub conv_filters: usize,
    pub positional_encoding: bool,
    pub optimizer: OptimizerKind,
}

impl ModelConfig {
    /// Defaults per kind: learning rate, batch and epochs as in the reference
    /// implementation table, shared desk-scale widths otherwise.
    pub fn defaults(kind: ModelKind) -> Self {
        let base = ModelConfig {
            kind,
            embed_dim: 32,
            hidden_dim: 64,
            lr: 0.001,
            batch: 128,
            epochs: 30,
            seed: 0,
            max_len: 10,
            dropout: 0.0,
            heads: 4,
            layers: 2,
            bottleneck: 16,
            margin: 0.5,
            neg_samples: 4,
            input_mask_rate: 0.2,
            conv_filters: 8,
            positional_encoding: true,
            optimizer: OptimizerKind::Adam,
        };
        match kind {
            ModelKind::Cnn => ModelConfig { dropout: 0.25, ..base },
            ModelKind::Rnn => ModelConfig { lr: 0.01, batch: 64, epochs: 50, dropout: 0.5, ..base },
            ModelKind::Gnn => ModelConfig { lr: 0.005, epochs: 40, ..base },
            ModelKind::Autoencoder => ModelConfig { batch: 256, epochs: 50, embed_dim: 16, ..base },
            ModelKind::Transformer => ModelConfig { lr: 0.0001, batch: 32, epochs: 20, ..base },
            ModelKind::Ncf => ModelConfig { lr: 0.0005, ..base },
            ModelKind::Siamese => ModelConfig { lr: 0.0005, batch: 64, epochs: 35, ..base },
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.max_len == 0 {
            return bad("batch, embed_dim, hidden_dim and max_len must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.input_mask_rate) {
            return bad("dropout rates must lie in [0,1)".into());
        }
        match self.kind {
            ModelKind::Transformer if self.heads == 0 || self.embed_dim % self.heads != 0 => {
                bad(format!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads))
            }
            ModelKind::Cnn if self.max_len < 4 || self.embed_dim < 4 || self.conv_filters == 0 => {
                bad("cnn needs max_len ≥ 4, embed_dim ≥ 4 and at least one filter".into())
            }
            ModelKind::Cnn if self.max_len % 2 != 0 => bad("cnn needs an even max_len so pooling reaches the most recent item".into()),
            ModelKind::Gnn if self.layers == 0 => bad("gnn needs at least one layer".into()),
            ModelKind::Autoencoder if self.bottleneck == 0 => bad("bottleneck must be positive".into()),
            ModelKind::Ncf | ModelKind::Gnn | ModelKind::Siamese if self.neg_samples == 0 => {
                bad("neg_samples must be positive".into())
            }
            _ => Ok(()),
        }
    }

    /// Width of the vectors returned by [`embed`].
    pub fn embedding_width(&self) -> usize {
        match self.kind {
            ModelKind::Autoencoder => self.bottleneck,
            _ => self.embed_dim,
        }
    }
}

/// Optional per-model overrides as found in experiment config files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub kind: Option<ModelKind>,
    pub embed_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub lr: Option<f64>,
    pub batch: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub max_len: Option<usize>,
    pub dropout: Option<f64>,
    pub heads: Option<usize>,
    pub layers: Option<usize>,
    pub bottleneck: Option<usize>,
    pub margin: Option<f64>,
    pub neg_samples: Option<usize>,
    pub input_mask_rate: Option<f64>,
    pub conv_filters: Option<usize>,
    pub positional_encoding: Option<bool>,
    pub optimizer: Option<OptimizerKind>,
}

impl ModelOverrides {
    pub fn apply(&self, mut c: ModelConfig) -> ModelConfig {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(embed_dim, hidden_dim, lr, batch, epochs, seed, max_len, dropout, heads, layers, bottleneck, margin, neg_samples, input_mask_rate, conv_filters, positional_encoding, optimizer);
        c
    }
}

/// Recent items of a session, most recent last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecContext {
    pub items: Vec<usize>,
}

impl RecContext {
    /// Keeps the last `max_len` items.
    pub fn new(items: &[usize], max_len: usize) -> Result<Self, ModelError> {
        if items.is_empty() {
            return Err(ModelError::EmptyContext);
        }
        let start = items.len().saturating_sub(max_len);
        Ok(RecContext { items: items[start..].to_vec() })
    }

    pub fn anchor(&self) -> usize {
        *self.items.last().expect("context is non-empty")
    }

    /// Left-padded to `len` with `pad`, keeping the most recent `len` items.
    pub fn padded(&self, len: usize, pad: usize) -> Vec<usize> {
        let tail = &self.items[self.items.len().saturating_sub(len)..];
        let mut out = vec![pad; len - tail.len()];
        out.extend_from_slice(tail);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    kind: ModelKind,
    config: ModelConfig,
    seed: u64,
    n_items: usize,
    data_fingerprint: String,
    cold_items: BTreeSet<usize>,
    training_log: Vec<f64>,
}

const EMBEDDINGS_TENSOR: &str = "item_embeddings";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub n_items: usize,
    pub params: ParamSet,
    /// `n_items × embedding_width`, cold-start rows already filled.
    pub item_embeddings: FeatureMatrix,
    /// Items absent from training, whose embeddings come from the cold-start rule.
    pub cold_items: BTreeSet<usize>,
    pub training_log: Vec<f64>,
    pub data_fingerprint: String,
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    fn expect(&self, kind: ModelKind) -> Result<(), ModelError> {
        if self.kind() == kind {
            Ok(())
        } else {
            Err(ModelError::KindMismatch { expected: kind, found: self.kind() })
        }
    }

    /// Writes `<stem>.ckpt` (parameters and embeddings) and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), ModelError> {
        let mut blob = self.params.clone();
        let e = &self.item_embeddings;
        blob.insert(EMBEDDINGS_TENSOR, Tensor::new(vec![e.rows, e.cols], e.data.clone())?);
        let mut bytes = Vec::new();
        write_checkpoint(&blob, &mut bytes)?;
        crate::util::write_atomic(&dir.join(format!("{stem}.ckpt")), &bytes)?;
        let sidecar = Sidecar {
            kind: self.kind(),
            config: self.config.clone(),
            seed: self.config.seed,
            n_items: self.n_items,
            data_fingerprint: self.data_fingerprint.clone(),
            cold_items: self.cold_items.clone(),
            training_log: self.training_log.clone(),
        };
        let mut json = serde_json::to_vec_pretty(&sidecar)?;
        json.push(b'\n');
        crate::util::write_atomic(&dir.join(format!("{stem}.json")), &json)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<TrainedModel, ModelError> {
        let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(dir.join(format!("{stem}.json")))?)?;
        let blob = read_checkpoint(std::fs::File::open(dir.join(format!("{stem}.ckpt")))?)?;
        let mut params = ParamSet::new();
        let mut embeddings = None;
        for (name, t) in blob.iter() {
            if name == EMBEDDINGS_TENSOR {
                embeddings = Some(FeatureMatrix { rows: t.shape[0], cols: t.shape[1], data: t.data.clone() });
            } else {
                params.insert(name, t.clone());
            }
        }
        let item_embeddings = embeddings.ok_or_else(|| ModelError::Checkpoint("missing item embeddings".into()))?;
        if item_embeddings.rows != sidecar.n_items {
            return Err(ModelError::Checkpoint("embedding rows disagree with sidecar".into()));
        }
        Ok(TrainedModel {
            config: sidecar.config,
            n_items: sidecar.n_items,
            params,
            item_embeddings,
            cold_items: sidecar.cold_items,
            training_log: sidecar.training_log,
            data_fingerprint: sidecar.data_fingerprint,
        })
    }
}

/// Trains a model on the training side of `data`. `g` is the training
/// co-occurrence graph; GNN and siamese models build it from the training
/// sessions when it is not supplied.
pub fn fit(config: &ModelConfig, data: &PreprocessedData, g: Option<&ItemGraph>) -> Result<TrainedModel, ModelError> {
    let set = TrainingSet::from_preprocessed(data);
    fit_on(config, &set, g)
}

pub fn fit_on(config: &ModelConfig, set: &TrainingSet, g: Option<&ItemGraph>) -> Result<TrainedModel, ModelError> {
    config.validate()?;
    if set.n_items == 0 || set.sessions.iter().all(|s| s.len() < 2) {
        return Err(ModelError::EmptyTrainingSet);
    }
    let owned;
    let graph = match g {
        Some(g) => g,
        None => {
            owned = set.graph();
            &owned
        }
    };
    let mut model = match config.kind {
        ModelKind::Cnn => cnn::fit(config, set)?,
        ModelKind::Rnn => rnn::fit(config, set)?,
        ModelKind::Gnn => gnn::fit(config, set, graph)?,
        ModelKind::Autoencoder => autoencoder::fit(config, set)?,
        ModelKind::Transformer => transformer::fit(config, set)?,
        ModelKind::Ncf => ncf::fit(config, set)?,
        ModelKind::Siamese => siamese::fit(config, set, graph)?,
    };
    apply_cold_start(&mut model, set);
    Ok(model)
}

/// Replaces embeddings of items absent from training by their category's mean
/// over trained items (global mean when the category has none). Embedding
/// tables used for scoring are patched the same way.
fn apply_cold_start(model: &mut TrainedModel, set: &TrainingSet) {
    let seen = set.seen_items();
    let cold: BTreeSet<usize> = (0..model.n_items).filter(|i| !seen.contains(i)).collect();
    if cold.is_empty() || seen.is_empty() {
        model.cold_items = cold;
        return;
    }
    let fill = cold_start_rows(&model.item_embeddings, &set.item_categories, &seen, &cold);
    let e = &mut model.item_embeddings;
    for (&i, row) in cold.iter().zip(&fill) {
        e.data[i * e.cols..(i + 1) * e.cols].copy_from_slice(row);
    }
    if let Some(table) = layers::scoring_table_name(model.kind()) {
        let t = model.params.get_mut(table).expect("embedding table present");
        let d = t.shape[1];
        for (&i, row) in cold.iter().zip(&fill) {
            t.data[i * d..(i + 1) * d].copy_from_slice(row);
        }
    }
    model.cold_items = cold;
}

fn cold_start_rows(e: &FeatureMatrix, categories: &[usize], seen: &BTreeSet<usize>, cold: &BTreeSet<usize>) -> Vec<Vec<f64>> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    let mut global = vec![0.0; e.cols];
    for &i in seen {
        let entry = sums.entry(categories[i]).or_insert_with(|| (vec![0.0; e.cols], 0));
        for (k, v) in e.row(i).iter().enumerate() {
            entry.0[k] += v;
            global[k] += v;
        }
        entry.1 += 1;
    }
    global.iter_mut().for_each(|v| *v /= seen.len() as f64);
    cold.iter()
        .map(|&i| match sums.get(&categories[i]) {
            Some((s, n)) => s.iter().map(|v| v / *n as f64).collect(),
            None => global.clone(),
        })
        .collect()
}

/// Scores every catalog item for `ctx`, dispatching on the model kind.
pub fn score(model: &TrainedModel, ctx: &RecContext) -> Result<Vec<f64>, ModelError> {
    if let Some(&bad) = ctx.items.iter().find(|&&i| i >= model.n_items) {
        return Err(ModelError::UnknownItem(bad));
    }
    match model.kind() {
        ModelKind::Cnn => score_cnn(model, ctx),
        ModelKind::Rnn => score_rnn(model, ctx),
        ModelKind::Gnn => score_gnn(model, ctx),
        ModelKind::Autoencoder => score_autoencoder(model, ctx),
        ModelKind::Transformer => score_transformer(model, ctx),
        ModelKind::Ncf => score_ncf(model, ctx),
        ModelKind::Siamese => score_siamese(model, ctx),
    }
}

pub fn score_cnn(model: &TrainedModel, ctx: &RecContext) -> Result<Vec<f64>, ModelError> {
    model.expect(ModelKind::Cnn)?;
    cnn::score(model, ctx)
}

pub fn score_rnn(model: &TrainedModel, ctx: &RecContext) -> Result<Vec<f64>, ModelError> {
    model.expect(ModelKind::Rnn)?;
    rnn::score(model, &ctx.items)
}

/// Scores a padded sequence; positions holding the pad index (`n_items`) are masked.
pub fn score_rnn_padded(model: &TrainedModel, padded: &[usize]) -> Result<Vec<f64>, ModelError> {
    model.expect(ModelKind::Rnn)?;
    if let Some(&bad) = padded.iter().find(|&&i| i > model.n_items) {
        return Err(ModelError::UnknownItem(bad));
    }
    rnn::score(model, padded)
}

pub fn score_gnn(model: &TrainedModel, ctx: &RecContext) -> Result<Vec<f64>, ModelError> {
    model.expect(ModelKind::Gnn)?;
    Ok(gnn::score(model, ctx))
}

pub fn score_autoencoder(model: &TrainedModel, ctx: &RecContext) -> Result<Vec<f64>, ModelError> {
    model.expect(ModelKind::Autoencoder)?;
    autoencoder::score(model, ctx)
}

pub fn score_transformer(model: &TrainedModel, ctx: &RecContext) -> Result<Vec<f64>, ModelError> {
    model.expect(ModelKind::Transformer)?;
    transformer::score(model, ctx)
}

pub fn score_ncf(model: &TrainedModel, ctx: &RecContext) -> Result<Vec<f64>, ModelError> {
    model.expect(ModelKind::Ncf)?;
    ncf::score(model, ctx)
}

pub fn score_siamese(model: &TrainedModel, ctx: &RecContext) -> Result<Vec<f64>, ModelError> {
    model.expect(ModelKind::Siamese)?;
    Ok(siamese::score(model, ctx))
}

/// Widths of the autoencoder's layers, input to output.
pub fn autoencoder_layer_widths(model: &TrainedModel) -> Result<Vec<usize>, ModelError> {
    model.expect(ModelKind::Autoencoder)?;
    Ok(autoencoder::layer_widths(&model.params))
}

/// The GMF branch output of an NCF model for every candidate, given a context vector.
pub fn ncf_gmf_branch(model: &TrainedModel, context: &[f64]) -> Result<Vec<f64>, ModelError> {
    model.expect(ModelKind::Ncf)?;
    ncf::gmf_branch(model, context)
}

/// NCF scores for an explicit context vector.
pub fn ncf_score_vector(model: &TrainedModel, context: &[f64]) -> Result<Vec<f64>, ModelError> {
    model.expect(ModelKind::Ncf)?;
    ncf::score_context(model, context)
}

/// Top-`k` items by (−score, index), optionally excluding the context items.
pub fn recommend_topk(model: &TrainedModel, ctx: &RecContext, k: usize, exclude_context: bool) -> Result<RankedList, ModelError> {
    if k == 0 || k > model.n_items {
        return Err(ModelError::InvalidK { k, n_items: model.n_items });
    }
    let scores = score(model, ctx)?;
    let exclude: BTreeSet<usize> = if exclude_context { ctx.items.iter().copied().collect() } else { BTreeSet::new() };
    Ok(RankedList::from_scores(&scores, &exclude, k))
}

/// The model's representation of one item.
pub fn embed(model: &TrainedModel, item: usize) -> Result<Vec<f64>, ModelError> {
    if item >= model.n_items {
        return Err(ModelError::UnknownItem(item));
    }
    Ok(model.item_embeddings.row(item).to_vec())
}

/// Convenience for splitting sessions into a [`TrainingSet`].
pub fn training_set(n_items: usize, item_categories: Vec<usize>, sessions: &[Session<usize>]) -> TrainingSet {
    TrainingSet::new(n_items, item_categories, sessions.iter().map(|s| s.items.clone()).collect())
}

impl TrainingSet {
    /// Co-occurrence graph of the training sessions.
    pub fn graph(&self) -> ItemGraph {
        let sessions: Vec<Session<usize>> = self
            .sessions
            .iter()
            .enumerate()
            .map(|(k, items)| Session {
                session_id: k.to_string(),
                user_id: String::new(),
                items: items.clone(),
                kinds: vec![crate::ingest::EventKind::View; items.len()],
                timestamps: vec![0; items.len()],
                start_ts: 0,
                end_ts: 0,
            })
            .collect();
        ItemGraph::build(&sessions, &self.item_categories, &GraphConfig::default())
    }
}

#[cfg(test)]
mod tests;
