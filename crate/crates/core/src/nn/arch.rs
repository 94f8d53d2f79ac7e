use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    /// Feature extractor -> main head -> auxiliary head on the main logits.
    Cascade,
    /// Main and auxiliary heads both read the extractor's features.
    Parallel,
}

impl std::fmt::Display for Paradigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Paradigm::Cascade => f.write_str("cascade"),
            Paradigm::Parallel => f.write_str("parallel"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub paradigm: Paradigm,
    pub input_dim: usize,
    /// Widths of the dense-BN-relu blocks of the feature extractor.
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub aux_hidden: usize,
    /// Output width of the parallel auxiliary head. Unused by the cascade.
    pub ssl_classes: usize,
}

impl Architecture {
    pub fn cascade(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Self {
        Self { paradigm: Paradigm::Cascade, input_dim, hidden, num_classes, aux_hidden: 64, ssl_classes: 4 }
    }

    pub fn parallel(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Self {
        Self { paradigm: Paradigm::Parallel, ..Self::cascade(input_dim, hidden, num_classes) }
    }

    pub fn with_aux_hidden(mut self, w: usize) -> Self {
        self.aux_hidden = w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be >= 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::InvalidSpec("feature extractor needs at least one block of width >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.aux_hidden == 0 {
            return Err(Error::InvalidSpec("aux_hidden must be >= 1".into()));
        }
        if self.paradigm == Paradigm::Parallel && self.ssl_classes < 2 {
            return Err(Error::InvalidSpec("ssl_classes must be >= 2".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().expect("validated")
    }

    fn aux_io(&self) -> (usize, usize) {
        match self.paradigm {
            Paradigm::Cascade => (self.num_classes, self.num_classes),
            Paradigm::Parallel => (self.feature_dim(), self.ssl_classes),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseSpan {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnSpan {
    pub gamma: usize,
    pub beta: usize,
    pub dim: usize,
}

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Partition {
    Phi,
    ThetaM,
    ThetaA,
}

/// Offsets of every tensor inside the flat parameter vector.
///
/// Order: per extractor block `W, b, gamma, beta`; then main head `W, b`;
/// then auxiliary head `W1, b1, W2, b2`. Partitions are contiguous.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub phi_dense: Vec<DenseSpan>,
    pub phi_bn: Vec<BnSpan>,
    pub main: DenseSpan,
    pub aux: [DenseSpan; 2],
    pub tensors: Vec<(usize, Vec<usize>)>,
    pub phi: Range<usize>,
    pub theta_m: Range<usize>,
    pub theta_a: Range<usize>,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let mut a = Alloc::default();
        let mut phi_dense = Vec::new();
        let mut phi_bn = Vec::new();
        let mut fan_in = arch.input_dim;
        for &h in &arch.hidden {
            phi_dense.push(a.dense(fan_in, h));
            let gamma = a.tensor(vec![h]);
            let beta = a.tensor(vec![h]);
            phi_bn.push(BnSpan { gamma, beta, dim: h });
            fan_in = h;
        }
        let phi_end = a.off;
        let main = a.dense(fan_in, arch.num_classes);
        let theta_m_end = a.off;
        let (aux_in, aux_out) = arch.aux_io();
        let a1 = a.dense(aux_in, arch.aux_hidden);
        let a2 = a.dense(arch.aux_hidden, aux_out);
        Layout {
            phi_dense,
            phi_bn,
            main,
            aux: [a1, a2],
            phi: 0..phi_end,
            theta_m: phi_end..theta_m_end,
            theta_a: theta_m_end..a.off,
            tensors: a.tensors,
        }
    }

    pub fn total(&self) -> usize {
        self.theta_a.end
    }

    pub fn partition_of(&self, idx: usize) -> Partition {
        if self.phi.contains(&idx) {
            Partition::Phi
        } else if self.theta_m.contains(&idx) {
            Partition::ThetaM
        } else {
            Partition::ThetaA
        }
    }

    pub fn range(&self, p: Partition) -> Range<usize> {
        match p {
            Partition::Phi => self.phi.clone(),
            Partition::ThetaM => self.theta_m.clone(),
            Partition::ThetaA => self.theta_a.clone(),
        }
    }

    /// Index ranges of all batch-norm affine parameters (gamma and beta).
    pub fn bn_affine_ranges(&self) -> Vec<Range<usize>> {
        self.phi_bn.iter().flat_map(|s| [s.gamma..s.gamma + s.dim, s.beta..s.beta + s.dim]).collect()
    }
}

#[derive(Default)]
struct Alloc {
    off: usize,
    tensors: Vec<(usize, Vec<usize>)>,
}

impl Alloc {
    fn tensor(&mut self, shape: Vec<usize>) -> usize {
        let at = self.off;
        self.off += shape.iter().product::<usize>();
        self.tensors.push((at, shape));
        at
    }

    fn dense(&mut self, fan_in: usize, fan_out: usize) -> DenseSpan {
        let w = self.tensor(vec![fan_in, fan_out]);
        let b = self.tensor(vec![fan_out]);
        DenseSpan { w, b, fan_in, fan_out }
    }
}
