use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, NormStats, Value};
use crate::error::{shape_err, Error, Result};
use crate::nn::arch::{Architecture, DenseSpan, Layout, Paradigm};
use crate::nn::batchnorm::{BatchNormState, BnMode, RunningMoments, DEFAULT_EPSILON, DEFAULT_MOMENTUM};

/// Network parameters in one flat vector (see [`Layout`]) plus batch-norm running moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Architecture,
    layout: Layout,
    pub params: Vec<f64>,
    pub bn: Vec<RunningMoments>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

/// Node ids of one forward pass recorded on a graph.
#[derive(Clone, Debug)]
pub struct Heads {
    pub features: NodeId,
    pub main: NodeId,
    pub aux: NodeId,
    pub bn_nodes: Vec<NodeId>,
}

impl Model {
    /// Glorot-uniform dense weights, zero biases, identity batch norm.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dense: Vec<DenseSpan> =
            layout.phi_dense.iter().copied().chain([layout.main, layout.aux[0], layout.aux[1]]).collect();
        for d in dense {
            let limit = (6.0 / (d.fan_in + d.fan_out) as f64).sqrt();
            for w in &mut params[d.w..d.w + d.fan_in * d.fan_out] {
                *w = rng.random_range(-limit..limit);
            }
        }
        for s in &layout.phi_bn {
            params[s.gamma..s.gamma + s.dim].fill(1.0);
        }
        let bn = layout.phi_bn.iter().map(|s| RunningMoments::identity(s.dim)).collect();
        Ok(Self { arch: arch.clone(), layout, params, bn, bn_momentum: DEFAULT_MOMENTUM, bn_eps: DEFAULT_EPSILON })
    }

    pub fn from_parts(
        arch: Architecture,
        params: Vec<f64>,
        bn: Vec<RunningMoments>,
        bn_momentum: f64,
        bn_eps: f64,
    ) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if params.len() != layout.total() {
            return Err(shape_err("Model::from_parts", layout.total(), params.len()));
        }
        if bn.len() != layout.phi_bn.len()
            || bn.iter().zip(&layout.phi_bn).any(|(r, s)| r.mean.len() != s.dim || r.var.len() != s.dim)
        {
            return Err(Error::InvalidSpec("running moments do not match architecture".into()));
        }
        if bn.iter().any(|r| r.var.iter().any(|v| *v < 0.0)) {
            return Err(Error::InvalidSpec("negative running variance".into()));
        }
        if !(bn_momentum > 0.0 && bn_momentum <= 1.0) || !(bn_eps > 0.0) {
            return Err(Error::InvalidSpec("bn momentum must be in (0,1] and epsilon > 0".into()));
        }
        Ok(Self { arch, layout, params, bn, bn_momentum, bn_eps })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn paradigm(&self) -> Paradigm {
        self.arch.paradigm
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Registers one parameter leaf per tensor, taking values from `params`.
    pub fn register_params(&self, g: &mut Graph, params: &[f64]) -> Vec<NodeId> {
        assert_eq!(params.len(), self.layout.total(), "flat parameter length");
        self.layout
            .tensors
            .iter()
            .map(|(off, shape)| {
                let n: usize = shape.iter().product();
                g.param(Value::new(shape.clone(), params[*off..off + n].to_vec()).expect("layout shape"))
            })
            .collect()
    }

    fn tensor_node(&self, p: &[NodeId], offset: usize) -> NodeId {
        let idx = self.layout.tensors.binary_search_by_key(&offset, |(o, _)| *o).expect("tensor offset");
        p[idx]
    }

    fn dense(&self, g: &mut Graph, p: &[NodeId], x: NodeId, d: &DenseSpan) -> NodeId {
        let w = self.tensor_node(p, d.w);
        let b = self.tensor_node(p, d.b);
        g.dense(x, w, b)
    }

    /// Records the network on `g` for input node `x`.
    pub fn build(&self, g: &mut Graph, p: &[NodeId], x: NodeId, mode: BnMode) -> Heads {
        let mut h = x;
        let mut bn_nodes = Vec::with_capacity(self.layout.phi_bn.len());
        for (i, (d, s)) in self.layout.phi_dense.iter().zip(&self.layout.phi_bn).enumerate() {
            let z = self.dense(g, p, h, d);
            let stats = if mode.uses_batch() {
                NormStats::Batch
            } else {
                NormStats::Fixed { mean: self.bn[i].mean.clone(), var: self.bn[i].var.clone() }
            };
            let gamma = self.tensor_node(p, s.gamma);
            let beta = self.tensor_node(p, s.beta);
            let n = g.batch_norm(z, gamma, beta, self.bn_eps, stats);
            bn_nodes.push(n);
            h = g.relu(n);
        }
        let features = h;
        let main = self.dense(g, p, features, &self.layout.main);
        let aux_in = match self.arch.paradigm {
            Paradigm::Cascade => main,
            Paradigm::Parallel => features,
        };
        let a = self.dense(g, p, aux_in, &self.layout.aux[0]);
        let a = g.relu(a);
        let aux = self.dense(g, p, a, &self.layout.aux[1]);
        Heads { features, main, aux, bn_nodes }
    }

    pub fn check_input(&self, x: &Value) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.arch.input_dim {
            return Err(shape_err("model input", format!("[B, {}]", self.arch.input_dim), x.shape()));
        }
        Ok(())
    }

    /// Builds and evaluates one pass at `params` without touching running moments.
    pub fn forward_graph(&self, params: &[f64], x: &Value, mode: BnMode) -> Result<(Graph, Heads)> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let p = self.register_params(&mut g, params);
        let xi = g.input(x.clone());
        let heads = self.build(&mut g, &p, xi, mode);
        g.forward()?;
        Ok((g, heads))
    }

    /// Applies the running-moment rule of `mode` using the batch moments seen by `heads`.
    pub fn absorb_bn(&mut self, g: &Graph, heads: &Heads, mode: BnMode) {
        if !mode.uses_batch() {
            return;
        }
        for (r, &n) in self.bn.iter_mut().zip(&heads.bn_nodes) {
            let (m, v) = g.bn_moments(n).expect("batch norm evaluated");
            r.absorb(mode, self.bn_momentum, m, v);
        }
    }

    /// Main and auxiliary logits without mutating the model.
    pub fn logits(&self, x: &Value, mode: BnMode) -> Result<(Value, Value)> {
        let (g, h) = self.forward_graph(&self.params, x, mode)?;
        Ok((g.value(h.main).cloned().expect("forward"), g.value(h.aux).cloned().expect("forward")))
    }

    /// Forward pass that also applies `mode`'s running-moment update.
    pub fn forward_mut(&mut self, x: &Value, mode: BnMode) -> Result<(Value, Value)> {
        let (g, h) = self.forward_graph(&self.params, x, mode)?;
        self.absorb_bn(&g, &h, mode);
        Ok((g.value(h.main).cloned().expect("forward"), g.value(h.aux).cloned().expect("forward")))
    }

    pub fn predict(&self, x: &Value, mode: BnMode) -> Result<Vec<usize>> {
        Ok(self.logits(x, mode)?.0.argmax_rows())
    }

    /// Fraction of rows whose main-head argmax equals the label.
    pub fn accuracy(&self, x: &Value, labels: &[usize], mode: BnMode) -> Result<f64> {
        if labels.len() != x.rows() {
            return Err(shape_err("accuracy labels", x.rows(), labels.len()));
        }
        if labels.is_empty() {
            return Err(Error::InvalidConfig("accuracy of an empty set".into()));
        }
        let hits = self.predict(x, mode)?.iter().zip(labels).filter(|(p, y)| p == y).count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Stand-alone view of extractor batch-norm layer `i`.
    pub fn bn_state(&self, i: usize, mode: BnMode) -> BatchNormState {
        let s = &self.layout.phi_bn[i];
        BatchNormState {
            gamma: self.params[s.gamma..s.gamma + s.dim].to_vec(),
            beta: self.params[s.beta..s.beta + s.dim].to_vec(),
            running: self.bn[i].clone(),
            momentum: self.bn_momentum,
            epsilon: self.bn_eps,
            mode,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::loss;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Value {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Value::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let arch = Architecture::cascade(16, vec![64, 64], 5);
        let a = Model::init(&arch, 7).unwrap();
        let b = Model::init(&arch, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, Model::init(&arch, 8).unwrap().params);
        let l = a.layout();
        let d = l.phi_dense[0];
        let limit = (6.0f64 / 80.0).sqrt();
        assert!(a.params[d.w..d.w + 16 * 64].iter().all(|w| w.abs() <= limit));
        assert!(a.params[d.b..d.b + 64].iter().all(|b| *b == 0.0));
        assert!(a.bn.iter().all(|r| r.mean.iter().all(|m| *m == 0.0) && r.var.iter().all(|v| *v == 1.0)));
    }

    #[test]
    fn invalid_class_count() {
        assert!(matches!(Model::init(&Architecture::cascade(4, vec![8], 1), 0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn duplicate_rows_give_duplicate_logits() {
        let m = Model::init(&Architecture::cascade(6, vec![8, 8], 3), 1).unwrap();
        let x = random_batch(1, 6, 2);
        let xx = Value::from_rows(&[x.row(0).to_vec(), x.row(0).to_vec()]).unwrap();
        let (main, aux) = m.logits(&xx, BnMode::RunningStats).unwrap();
        assert_eq!(main.row(0), main.row(1));
        assert_eq!(aux.row(0), aux.row(1));
    }

    fn entropy_grad(m: &Model, x: &Value) -> Vec<f64> {
        let mut g = Graph::new();
        let p = m.register_params(&mut g, &m.params);
        let xi = g.input(x.clone());
        let h = m.build(&mut g, &p, xi, BnMode::TrainStats);
        g.entropy(h.aux);
        g.forward().unwrap();
        g.backward().unwrap().into_flat()
    }

    #[test]
    fn cascade_entropy_reaches_extractor_and_main_head() {
        let m = Model::init(&Architecture::cascade(6, vec![8, 8], 3), 4).unwrap();
        let grad = entropy_grad(&m, &random_batch(12, 6, 5));
        let l = m.layout();
        assert!(grad[l.phi.clone()].iter().any(|g| g.abs() > 1e-8));
        assert!(grad[l.theta_m.clone()].iter().any(|g| g.abs() > 1e-8));
    }

    #[test]
    fn parallel_aux_loss_never_reaches_main_head() {
        let m = Model::init(&Architecture::parallel(6, vec![8, 8], 3), 4).unwrap();
        let grad = entropy_grad(&m, &random_batch(12, 6, 5));
        let l = m.layout();
        assert!(grad[l.theta_m.clone()].iter().all(|g| *g == 0.0));
        assert!(grad[l.phi.clone()].iter().any(|g| g.abs() > 1e-8));
    }

    #[test]
    fn main_loss_never_reaches_aux_head() {
        let m = Model::init(&Architecture::cascade(6, vec![8], 3), 9).unwrap();
        let x = random_batch(10, 6, 1);
        let mut g = Graph::new();
        let p = m.register_params(&mut g, &m.params);
        let xi = g.input(x);
        let h = m.build(&mut g, &p, xi, BnMode::TrainStats);
        g.cross_entropy(h.main, (0..10).map(|i| i % 3).collect());
        g.forward().unwrap();
        let grad = g.backward().unwrap().into_flat();
        assert!(grad[m.layout().theta_a.clone()].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_mode_overwrites_running_moments() {
        let mut m = Model::init(&Architecture::cascade(6, vec![8], 3), 0).unwrap();
        let x = random_batch(16, 6, 11);
        m.forward_mut(&x, BnMode::BatchStats).unwrap();
        let after_one = m.bn.clone();
        m.forward_mut(&x, BnMode::BatchStats).unwrap();
        assert_eq!(after_one, m.bn);
        let before = m.clone();
        m.forward_mut(&x, BnMode::RunningStats).unwrap();
        assert_eq!(before, m);
    }

    #[test]
    fn graph_logits_match_loss_helpers() {
        let m = Model::init(&Architecture::cascade(6, vec![8], 3), 2).unwrap();
        let x = random_batch(8, 6, 3);
        let (g, h) = m.forward_graph(&m.params, &x, BnMode::BatchStats).unwrap();
        let main = g.value(h.main).unwrap();
        assert_eq!(main.shape(), &[8, 3]);
        assert!(loss::entropy(main) <= 3f64.ln());
    }
}
