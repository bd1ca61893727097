use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::ModelKind;
use crate::autodiff::{AutodiffError, ParamSet, Tape, Tensor, Var};
use crate::preprocess::FeatureMatrix;

pub(super) const ITEM_TABLE: &str = "item_embedding";

/// Parameter patched by the cold-start rule, for models that score through an item table.
pub(super) fn scoring_table_name(kind: ModelKind) -> Option<&'static str> {
    match kind {
        ModelKind::Cnn | ModelKind::Rnn | ModelKind::Transformer | ModelKind::Ncf => Some(ITEM_TABLE),
        ModelKind::Gnn | ModelKind::Autoencoder | ModelKind::Siamese => None,
    }
}

pub(super) fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::glorot(&[rows, cols], rows, cols, rng)
}

pub(super) fn dense(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// `h · table[0..n_items]ᵀ + bias`.
pub(super) fn tied_logits(tape: &mut Tape, h: Var, table: Var, bias: Var, n_items: usize) -> Result<Var, AutodiffError> {
    let all: Vec<usize> = (0..n_items).collect();
    let items = tape.gather(table, &all)?;
    let logits = tape.matmul_bt(h, items)?;
    tape.add(logits, bias)
}

pub(super) fn one_hot(targets: &[usize], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; targets.len() * n];
    for (r, &t) in targets.iter().enumerate() {
        y[r * n + t] = 1.0;
    }
    y
}

/// Records every parameter as a constant (no gradients), for scoring.
pub(super) fn bind_constants(tape: &mut Tape, params: &ParamSet) -> Result<Vec<Var>, AutodiffError> {
    params.tensors().iter().map(|t| tape.constant(t.clone())).collect()
}

pub(super) fn table_rows(t: &Tensor, n: usize) -> FeatureMatrix {
    let d = t.shape[1];
    FeatureMatrix { rows: n, cols: d, data: t.data[..n * d].to_vec() }
}

/// (context, next item) pairs for every position of every session; contexts keep the last `max_len` items.
pub(super) fn prefix_examples(sessions: &[Vec<usize>], max_len: usize) -> Vec<(Vec<usize>, usize)> {
    let mut out = Vec::new();
    for s in sessions {
        for t in 1..s.len() {
            out.push((s[t.saturating_sub(max_len)..t].to_vec(), s[t]));
        }
    }
    out
}

/// Uniform draws from items outside `exclude` (any item if nothing else is left).
pub(super) fn sample_negatives(rng: &mut ChaCha8Rng, n_items: usize, exclude: &[usize], k: usize) -> Vec<usize> {
    let blocked = exclude.iter().filter(|&&i| i < n_items).collect::<std::collections::BTreeSet<_>>().len();
    (0..k)
        .map(|_| loop {
            let j = rng.gen_range(0..n_items);
            if blocked >= n_items || !exclude.contains(&j) {
                break j;
            }
        })
        .collect()
}

/// Row groups averaging each context's rows.
pub(super) fn mean_groups<'a>(contexts: impl Iterator<Item = &'a [usize]>) -> Vec<Vec<(usize, f64)>> {
    contexts
        .map(|c| {
            let w = 1.0 / c.len() as f64;
            c.iter().map(|&i| (i, w)).collect()
        })
        .collect()
}

/// Sinusoidal position codes, `len × d`.
pub(super) fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Layer normalisation with learned gain and shift.
pub(super) fn layer_norm(tape: &mut Tape, x: Var, gain: Var, shift: Var) -> Result<Var, AutodiffError> {
    let n = tape.normalize_rows(x, 1e-5)?;
    let g = tape.mul(n, gain)?;
    tape.add(g, shift)
}
