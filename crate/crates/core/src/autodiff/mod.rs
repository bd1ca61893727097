//! Dense tensors with a reverse-mode tape, optimizers and checkpointing.

mod checkpoint;
mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{OptimizerKind, OptimizerState};
pub use params::ParamSet;
pub use tape::{ConvSpec, Csr, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Tanh,
}

/// Dispatches a binary or unary elementwise op by kind.
pub fn elementwise(tape: &mut Tape, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
    let need_b = || b.ok_or_else(|| AutodiffError::ShapeMismatch(format!("{kind:?} needs two operands")));
    match kind {
        ElementwiseKind::Add => tape.add(a, need_b()?),
        ElementwiseKind::Sub => tape.sub(a, need_b()?),
        ElementwiseKind::Mul => tape.mul(a, need_b()?),
        ElementwiseKind::Relu => tape.relu(a),
        ElementwiseKind::Sigmoid => tape.sigmoid(a),
        ElementwiseKind::Tanh => tape.tanh(a),
    }
}

/// Inverted dropout mask: zeros with probability `rate`, survivors scaled by `1/(1-rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut impl Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Dropout on the tape. Identity when `training` is false or `rate` is 0.
pub fn dropout(tape: &mut Tape, x: Var, rate: f64, training: bool, seed: u64) -> Result<Var, AutodiffError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(AutodiffError::ShapeMismatch(format!("dropout rate {rate} outside [0,1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = dropout_mask(tape.value(x).len(), rate, &mut rng);
    tape.mul_const(x, mask)
}

/// Central-difference gradient check of a scalar function.
///
/// `f` records its computation on the supplied tape from the leaf it is given
/// and returns the scalar output. Returns the max over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad())?;
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: Tensor| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let v = tape.leaf(t)?;
        let o = f(&mut tape, v)?;
        Ok(tape.value(o).item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data[i] += eps;
        let mut minus = x.clone();
        minus.data[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

#[cfg(test)]
mod tests;
