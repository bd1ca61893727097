use serde::{Deserialize, Serialize};

use super::{AutodiffError, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment buffers, one per parameter tensor.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update using the gradients stored on each parameter tensor.
    pub fn step(&mut self, kind: OptimizerKind, params: &mut ParamSet, lr: f64) -> Result<(), AutodiffError> {
        if self.m.is_empty() {
            self.m = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(AutodiffError::ShapeMismatch(format!(
                "optimizer state tracks {} tensors, params have {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let Some(g) = p.grad.as_ref() else { continue };
            if g.len() != p.data.len() || self.m[i].len() != g.len() {
                return Err(AutodiffError::ShapeMismatch(format!("gradient for parameter {i} has wrong length")));
            }
            match kind {
                OptimizerKind::Sgd => {
                    for (x, gv) in p.data.iter_mut().zip(g) {
                        *x -= lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..g.len() {
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        p.data[j] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
            if p.data.iter().any(|x| !x.is_finite()) {
                return Err(AutodiffError::NonFinite(format!("parameter {i} after optimizer step")));
            }
        }
        Ok(())
    }
}
