use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Value;
use crate::error::{Error, Result};

/// Seed of the default class centers; independent of the sampling seed so that
/// all experiment seeds share one task.
const DEFAULT_CENTER_SEED: u64 = 0x5eed_c0de;

/// Gaussian-blob classification task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub centers: Vec<Vec<f64>>,
    pub stddev: f64,
    pub n_train: usize,
    pub n_holdout: usize,
    pub seed: u64,
}

impl Default for SourceSpec {
    fn default() -> Self {
        Self::random_centers(5, 16, 1.1, 1.0, DEFAULT_CENTER_SEED).with_sizes(5000, 1000)
    }
}

impl SourceSpec {
    /// Class centers drawn from `N(0, center_scale^2)` per coordinate.
    pub fn random_centers(num_classes: usize, dim: usize, center_scale: f64, stddev: f64, center_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(center_seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let centers =
            (0..num_classes).map(|_| (0..dim).map(|_| center_scale * normal.sample(&mut rng)).collect()).collect();
        Self { num_classes, dim, centers, stddev, n_train: 0, n_holdout: 0, seed: 0 }
    }

    pub fn with_sizes(mut self, n_train: usize, n_holdout: usize) -> Self {
        self.n_train = n_train;
        self.n_holdout = n_holdout;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("num_classes must be >= 2".into()));
        }
        if self.dim < 2 {
            return Err(Error::InvalidSpec("dim must be >= 2 for planar rotations".into()));
        }
        if !(self.stddev > 0.0) || !self.stddev.is_finite() {
            return Err(Error::InvalidSpec(format!("stddev must be positive, got {}", self.stddev)));
        }
        if self.centers.len() != self.num_classes || self.centers.iter().any(|c| c.len() != self.dim) {
            return Err(Error::InvalidSpec("need one center of length dim per class".into()));
        }
        Ok(())
    }

    /// `n` class-balanced samples (labels cycle through classes, then rows are shuffled).
    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> LabeledSet {
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.num_classes).collect();
        labels.shuffle(rng);
        let normal = Normal::new(0.0, self.stddev).expect("validated stddev");
        let mut data = Vec::with_capacity(n * self.dim);
        for &y in &labels {
            data.extend(self.centers[y].iter().map(|c| c + normal.sample(rng)));
        }
        LabeledSet { x: Value::matrix(n, self.dim, data).expect("n x dim"), y: labels }
    }
}

/// Feature rows with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub x: Value,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet { x: self.x.select_rows(idx), y: idx.iter().map(|&i| self.y[i]).collect() }
    }

    /// CSV with header `f0,..,f{F-1},label`.
    pub fn to_csv(&self) -> String {
        let f = self.x.cols();
        let mut out: String = (0..f).map(|j| format!("f{j},")).collect();
        out.push_str("label\n");
        for i in 0..self.len() {
            for v in self.x.row(i) {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{}\n", self.y[i]));
        }
        out
    }
}

/// Train and holdout sets drawn from `spec`, deterministic in `spec.seed`.
pub fn gen_source(spec: &SourceSpec) -> Result<(LabeledSet, LabeledSet)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let train = spec.sample(spec.n_train, &mut rng);
    let holdout = spec.sample(spec.n_holdout, &mut rng);
    Ok((train, holdout))
}
