use serde::{Deserialize, Serialize};

use crate::autodiff::{batch_moments, Value};
use crate::error::{shape_err, Error, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Where batch normalization takes its moments from, and what it does to the
/// running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Batch moments; running estimates follow an exponential moving average.
    TrainStats,
    /// Stored running moments; nothing is mutated.
    RunningStats,
    /// Batch moments; running estimates are overwritten with them.
    BatchStats,
}

impl BnMode {
    pub fn uses_batch(self) -> bool {
        !matches!(self, BnMode::RunningStats)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningMoments {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], var: vec![1.0; dim] }
    }

    /// Applies the running-estimate rule of `mode` given a batch's moments.
    pub fn absorb(&mut self, mode: BnMode, momentum: f64, mean: &[f64], var: &[f64]) {
        match mode {
            BnMode::RunningStats => {}
            BnMode::BatchStats => {
                self.mean.copy_from_slice(mean);
                self.var.copy_from_slice(var);
            }
            BnMode::TrainStats => {
                for (r, b) in self.mean.iter_mut().zip(mean) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
                for (r, b) in self.var.iter_mut().zip(var) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
    }
}

/// A self-contained batch-norm layer: affine parameters plus running moments.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running: RunningMoments,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: BnMode,
}

impl BatchNormState {
    pub fn new(dim: usize, mode: BnMode) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running: RunningMoments::identity(dim),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
            mode,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Value) -> Result<Value> {
        let f = self.dim();
        if x.shape().len() != 2 || x.cols() != f {
            return Err(shape_err("batchnorm_forward", format!("[B, {f}]"), x.shape()));
        }
        let (mean, var) = if self.mode.uses_batch() {
            if x.rows() < 2 {
                return Err(Error::BatchTooSmall { needed: 2, got: x.rows() });
            }
            batch_moments(x)
        } else {
            (self.running.mean.clone(), self.running.var.clone())
        };
        let mut out = Vec::with_capacity(x.len());
        for i in 0..x.rows() {
            for (j, v) in x.row(i).iter().enumerate() {
                let xhat = (v - mean[j]) / (var[j] + self.epsilon).sqrt();
                out.push(self.gamma[j] * xhat + self.beta[j]);
            }
        }
        self.running.absorb(self.mode, self.momentum, &mean, &var);
        Value::new(x.shape().to_vec(), out)
    }
}
