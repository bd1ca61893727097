//! Single-layer LSTM over the context, trained sequence-to-sequence on next-item targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{bind_constants, dense, glorot, one_hot, table_rows, tied_logits, ITEM_TABLE};
use super::train::{check_architecture, finish, train, Architecture, TrainingSet};
use super::{ModelConfig, ModelError, TrainedModel};
use crate::autodiff::{dropout, AutodiffError, ParamSet, Tape, Tensor, Var};

fn init(cfg: &ModelConfig, n_items: usize, rng: &mut ChaCha8Rng) -> ParamSet {
    let (d, h) = (cfg.embed_dim, cfg.hidden_dim);
    let mut p = ParamSet::new();
    p.insert(ITEM_TABLE, glorot(rng, n_items + 1, d));
    p.insert("lstm_w", glorot(rng, d + h, 4 * h));
    // gate order i, f, g, o; forget gate starts open
    let mut b = vec![0.0; 4 * h];
    b[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
    p.insert("lstm_b", Tensor::new(vec![4 * h], b).expect("finite"));
    p.insert("out_w", glorot(rng, h, d));
    p.insert("out_b", Tensor::zeros(&[d]));
    p.insert("output_bias", Tensor::zeros(&[n_items]));
    p
}

/// Runs the LSTM over `B × T` indices; steps holding `pad` leave the state unchanged.
/// Returns the hidden state after every step.
fn run(tape: &mut Tape, p: &[Var], cfg: &ModelConfig, idx: &[usize], bsz: usize, pad: usize) -> Result<Vec<Var>, AutodiffError> {
    let &[table, w, b, ..] = p else {
        return Err(AutodiffError::ShapeMismatch("rnn expects 6 parameters".into()));
    };
    let hd = cfg.hidden_dim;
    let steps = idx.len() / bsz;
    let mut h = tape.constant(Tensor::zeros(&[bsz, hd]))?;
    let mut c = tape.constant(Tensor::zeros(&[bsz, hd]))?;
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let col: Vec<usize> = (0..bsz).map(|r| idx[r * steps + t]).collect();
        let x = tape.gather(table, &col)?;
        let xh = tape.concat_cols(x, h)?;
        let z = dense(tape, xh, w, b)?;
        let zi = tape.slice_cols(z, 0, hd)?;
        let zf = tape.slice_cols(z, hd, 2 * hd)?;
        let zg = tape.slice_cols(z, 2 * hd, 3 * hd)?;
        let zo = tape.slice_cols(z, 3 * hd, 4 * hd)?;
        let (i, f, g, o) = (tape.sigmoid(zi)?, tape.sigmoid(zf)?, tape.tanh(zg)?, tape.sigmoid(zo)?);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c_new = tape.add(fc, ig)?;
        let tc = tape.tanh(c_new)?;
        let h_new = tape.mul(o, tc)?;
        if col.iter().all(|&i| i != pad) {
            h = h_new;
            c = c_new;
        } else {
            let keep: Vec<f64> = col.iter().flat_map(|&i| std::iter::repeat(if i == pad { 0.0 } else { 1.0 }).take(hd)).collect();
            let hold: Vec<f64> = keep.iter().map(|m| 1.0 - m).collect();
            h = blend(tape, h_new, h, keep.clone(), hold.clone())?;
            c = blend(tape, c_new, c, keep, hold)?;
        }
        out.push(h);
    }
    Ok(out)
}

fn blend(tape: &mut Tape, new: Var, old: Var, keep: Vec<f64>, hold: Vec<f64>) -> Result<Var, AutodiffError> {
    let a = tape.mul_const(new, keep)?;
    let b = tape.mul_const(old, hold)?;
    tape.add(a, b)
}

fn head(tape: &mut Tape, p: &[Var], cfg: &ModelConfig, h: Var, n_items: usize, training: bool, seed: u64) -> Result<Var, AutodiffError> {
    let h = dropout(tape, h, cfg.dropout, training, seed)?;
    let y = dense(tape, h, p[3], p[4])?;
    tied_logits(tape, y, p[0], p[5], n_items)
}

pub(super) struct Batch {
    idx: Vec<usize>,
    bsz: usize,
    /// per step: (row, target) of rows that have a target
    targets: Vec<Vec<(usize, usize)>>,
    seed: u64,
}

struct Rnn<'a> {
    cfg: &'a ModelConfig,
    n_items: usize,
    sequences: Vec<Vec<usize>>,
}

impl<'a> Rnn<'a> {
    fn new(cfg: &'a ModelConfig, set: &TrainingSet) -> Self {
        let sequences = set
            .sessions
            .iter()
            .filter(|s| s.len() >= 2)
            .map(|s| s[s.len().saturating_sub(cfg.max_len + 1)..].to_vec())
            .collect();
        Rnn { cfg, n_items: set.n_items, sequences }
    }
}

impl Architecture for Rnn<'_> {
    type Batch = Batch;

    fn n_examples(&self) -> usize {
        self.sequences.len()
    }

    fn make_batch(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Batch {
        let steps = idx.iter().map(|&e| self.sequences[e].len() - 1).max().unwrap_or(0);
        let mut flat = vec![self.n_items; idx.len() * steps];
        let mut targets = vec![Vec::new(); steps];
        for (r, &e) in idx.iter().enumerate() {
            let s = &self.sequences[e];
            for t in 0..s.len() - 1 {
                flat[r * steps + t] = s[t];
                targets[t].push((r, s[t + 1]));
            }
        }
        Batch { idx: flat, bsz: idx.len(), targets, seed: rng.gen() }
    }

    fn loss(&self, tape: &mut Tape, p: &[Var], batch: &Batch) -> Result<Var, AutodiffError> {
        let hs = run(tape, p, self.cfg, &batch.idx, batch.bsz, self.n_items)?;
        let total: usize = batch.targets.iter().map(Vec::len).sum();
        let mut loss: Option<Var> = None;
        for (t, (h, tgt)) in hs.into_iter().zip(&batch.targets).enumerate() {
            if tgt.is_empty() {
                continue;
            }
            let rows = tape.row_combine(h, tgt.iter().map(|&(r, _)| vec![(r, 1.0)]).collect())?;
            let logits = head(tape, p, self.cfg, rows, self.n_items, true, batch.seed.wrapping_add(t as u64))?;
            let targets: Vec<usize> = tgt.iter().map(|&(_, y)| y).collect();
            let ce = tape.softmax_cross_entropy(logits, one_hot(&targets, self.n_items))?;
            let part = tape.scale(ce, tgt.len() as f64 / total as f64)?;
            loss = Some(match loss {
                Some(l) => tape.add(l, part)?,
                None => part,
            });
        }
        loss.ok_or_else(|| AutodiffError::ShapeMismatch("batch without targets".into()))
    }
}

pub(super) fn fit(cfg: &ModelConfig, set: &TrainingSet) -> Result<TrainedModel, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init(cfg, set.n_items, &mut rng);
    let log = train(&Rnn::new(cfg, set), cfg, &mut params, &mut rng)?;
    let emb = table_rows(params.get(ITEM_TABLE).expect("table"), set.n_items);
    Ok(finish(cfg, set, params, emb, log))
}

pub(super) fn grad_check(cfg: &ModelConfig, set: &TrainingSet, eps: f64) -> Result<f64, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init(cfg, set.n_items, &mut rng);
    check_architecture(&Rnn::new(cfg, set), &params, &mut rng, 3, eps)
}

/// Scores from the final state; entries equal to the pad index are masked steps.
pub(super) fn score(model: &TrainedModel, seq: &[usize]) -> Result<Vec<f64>, ModelError> {
    if seq.iter().all(|&i| i == model.n_items) {
        return Err(ModelError::EmptyContext);
    }
    let mut tape = Tape::new();
    let p = bind_constants(&mut tape, &model.params)?;
    let hs = run(&mut tape, &p, &model.config, seq, 1, model.n_items)?;
    let last = *hs.last().expect("at least one step");
    let logits = head(&mut tape, &p, &model.config, last, model.n_items, false, 0)?;
    Ok(tape.value(logits).data.clone())
}
