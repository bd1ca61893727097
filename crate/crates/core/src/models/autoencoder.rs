//! Denoising autoencoder over session multi-hot vectors:
//! `n_items → hidden → bottleneck → hidden → n_items`, sigmoid output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{bind_constants, dense, glorot};
use super::train::{check_architecture, finish, train, Architecture, TrainingSet};
use super::{ModelConfig, ModelError, RecContext, TrainedModel};
use crate::autodiff::{AutodiffError, ParamSet, Tape, Tensor, Var};
use crate::preprocess::FeatureMatrix;

fn init(cfg: &ModelConfig, n_items: usize, rng: &mut ChaCha8Rng) -> ParamSet {
    let (h, z) = (cfg.hidden_dim, cfg.bottleneck);
    let mut p = ParamSet::new();
    p.insert("enc_w1", glorot(rng, n_items, h));
    p.insert("enc_b1", Tensor::zeros(&[h]));
    p.insert("enc_w2", glorot(rng, h, z));
    p.insert("enc_b2", Tensor::zeros(&[z]));
    p.insert("dec_w1", glorot(rng, z, h));
    p.insert("dec_b1", Tensor::zeros(&[h]));
    p.insert("dec_w2", glorot(rng, h, n_items));
    p.insert("dec_b2", Tensor::zeros(&[n_items]));
    p
}

/// Layer widths in order, input to output.
pub(super) fn layer_widths(params: &ParamSet) -> Vec<usize> {
    let mut w: Vec<usize> = vec![params.get("enc_w1").expect("enc_w1").shape[0]];
    for name in ["enc_w1", "enc_w2", "dec_w1", "dec_w2"] {
        w.push(params.get(name).expect("layer").shape[1]);
    }
    w
}

fn encode(tape: &mut Tape, p: &[Var], x: Var) -> Result<Var, AutodiffError> {
    let h = dense(tape, x, p[0], p[1])?;
    let h = tape.relu(h)?;
    dense(tape, h, p[2], p[3])
}

fn decode_logits(tape: &mut Tape, p: &[Var], z: Var) -> Result<Var, AutodiffError> {
    let h = dense(tape, z, p[4], p[5])?;
    let h = tape.relu(h)?;
    dense(tape, h, p[6], p[7])
}

pub(super) struct Batch {
    input: Vec<f64>,
    target: Vec<f64>,
    rows: usize,
}

struct Autoencoder<'a> {
    cfg: &'a ModelConfig,
    n_items: usize,
    baskets: Vec<Vec<usize>>,
}

impl Architecture for Autoencoder<'_> {
    type Batch = Batch;

    fn n_examples(&self) -> usize {
        self.baskets.len()
    }

    fn make_batch(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Batch {
        let n = self.n_items;
        let mut input = vec![0.0; idx.len() * n];
        let mut target = vec![0.0; idx.len() * n];
        for (r, &e) in idx.iter().enumerate() {
            let basket = &self.baskets[e];
            let mut kept = 0;
            for &i in basket {
                target[r * n + i] = 1.0;
                if rng.gen::<f64>() >= self.cfg.input_mask_rate {
                    input[r * n + i] = 1.0;
                    kept += 1;
                }
            }
            if kept == 0 {
                input[r * n + basket[rng.gen_range(0..basket.len())]] = 1.0;
            }
        }
        Batch { input, target, rows: idx.len() }
    }

    fn loss(&self, tape: &mut Tape, p: &[Var], batch: &Batch) -> Result<Var, AutodiffError> {
        let x = tape.constant(Tensor::new(vec![batch.rows, self.n_items], batch.input.clone())?)?;
        let z = encode(tape, p, x)?;
        let logits = decode_logits(tape, p, z)?;
        tape.bce_with_logits(logits, batch.target.clone())
    }
}

fn arch<'a>(cfg: &'a ModelConfig, set: &TrainingSet) -> Autoencoder<'a> {
    let baskets = set
        .sessions
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| {
            let mut b = s.clone();
            b.sort_unstable();
            b.dedup();
            b
        })
        .collect();
    Autoencoder { cfg, n_items: set.n_items, baskets }
}

/// Encoder output for each one-hot item.
fn item_codes(params: &ParamSet, n_items: usize) -> Result<FeatureMatrix, AutodiffError> {
    let mut tape = Tape::new();
    let p = bind_constants(&mut tape, params)?;
    let mut eye = vec![0.0; n_items * n_items];
    for i in 0..n_items {
        eye[i * n_items + i] = 1.0;
    }
    let x = tape.constant(Tensor::new(vec![n_items, n_items], eye)?)?;
    let z = encode(&mut tape, &p, x)?;
    let t = tape.value(z);
    Ok(FeatureMatrix { rows: n_items, cols: t.shape[1], data: t.data.clone() })
}

pub(super) fn fit(cfg: &ModelConfig, set: &TrainingSet) -> Result<TrainedModel, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init(cfg, set.n_items, &mut rng);
    let log = train(&arch(cfg, set), cfg, &mut params, &mut rng)?;
    let codes = item_codes(&params, set.n_items)?;
    Ok(finish(cfg, set, params, codes, log))
}

pub(super) fn grad_check(cfg: &ModelConfig, set: &TrainingSet, eps: f64) -> Result<f64, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init(cfg, set.n_items, &mut rng);
    check_architecture(&arch(cfg, set), &params, &mut rng, 4, eps)
}

/// Reconstruction probabilities for the context's multi-hot vector.
pub(super) fn score(model: &TrainedModel, ctx: &RecContext) -> Result<Vec<f64>, ModelError> {
    let n = model.n_items;
    let mut x = vec![0.0; n];
    for &i in &ctx.items {
        x[i] = 1.0;
    }
    let mut tape = Tape::new();
    let p = bind_constants(&mut tape, &model.params)?;
    let xv = tape.constant(Tensor::new(vec![1, n], x)?)?;
    let z = encode(&mut tape, &p, xv)?;
    let logits = decode_logits(&mut tape, &p, z)?;
    let probs = tape.sigmoid(logits)?;
    Ok(tape.value(probs).data.clone())
}
