use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::ParamMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain SGD, heavy-ball momentum if `momentum > 0`.
    Sgd,
    /// SGD with Nesterov momentum.
    Nesterov,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    /// `lr * (1 - epoch / epochs)`.
    Linear,
}

impl LrDecay {
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrDecay::Constant => base,
            LrDecay::Linear => base * (1.0 - epoch as f64 / epochs.max(1) as f64),
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First-order optimizer over a flat parameter vector. Entries outside the
/// mask passed to [`Optimizer::step`] are never read or written.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    buf: Vec<f64>,
    second: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, len: usize) -> Self {
        let second = if kind == OptimizerKind::Adam { vec![0.0; len] } else { Vec::new() };
        Self { kind, momentum, buf: vec![0.0; len], second, t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, mask: &ParamMask) -> Result<()> {
        if params.len() != self.buf.len() || grad.len() != params.len() || mask.total() != params.len() {
            return Err(shape_err("optimizer step", self.buf.len(), (params.len(), grad.len(), mask.total())));
        }
        if let Some(i) = mask.indices().find(|&i| !grad[i].is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        self.t += 1;
        let mu = self.momentum;
        match self.kind {
            OptimizerKind::Sgd => {
                for i in mask.indices() {
                    let d = if mu > 0.0 {
                        self.buf[i] = mu * self.buf[i] + grad[i];
                        self.buf[i]
                    } else {
                        grad[i]
                    };
                    params[i] -= lr * d;
                }
            }
            OptimizerKind::Nesterov => {
                for i in mask.indices() {
                    self.buf[i] = mu * self.buf[i] + grad[i];
                    params[i] -= lr * (grad[i] + mu * self.buf[i]);
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - ADAM_BETA1.powi(self.t);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t);
                for i in mask.indices() {
                    self.buf[i] = ADAM_BETA1 * self.buf[i] + (1.0 - ADAM_BETA1) * grad[i];
                    self.second[i] = ADAM_BETA2 * self.second[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                    params[i] -= lr * (self.buf[i] / c1) / ((self.second[i] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
        Ok(())
    }
}
