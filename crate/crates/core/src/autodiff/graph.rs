use crate::autodiff::Value;
use crate::error::{shape_err, Error, Result};

pub type NodeId = usize;

/// Source of the normalization moments used by a batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub enum NormStats {
    /// Mean and biased variance of the incoming batch; gradients flow through them.
    Batch,
    /// Stored moments treated as constants.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Clone, Debug)]
pub enum Op {
    Param,
    Input,
    MatMul(NodeId, NodeId),
    /// `[n, m] + [m]`, bias broadcast over rows.
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    LogSoftmax(NodeId),
    Sum(NodeId),
    /// Sum of all entries divided by the row count.
    MeanRows(NodeId),
    /// Mean negative log-likelihood of row-wise labels, input is log-probabilities.
    Nll(NodeId, Vec<usize>),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        stats: NormStats,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param => "param",
            Op::Input => "input",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
            Op::Nll(..) => "nll",
            Op::BatchNorm { .. } => "batch_norm",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Param | Op::Input => vec![],
            Op::MatMul(a, b) | Op::AddRow(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::MeanRows(a)
            | Op::Nll(a, _) => vec![*a],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Option<Value>,
    bn: Option<BnCache>,
}

/// Parameter gradients, one span per parameter leaf in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector {
    flat: Vec<f64>,
    spans: Vec<(usize, Vec<usize>)>,
}

impl GradientVector {
    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn num_leaves(&self) -> usize {
        self.spans.len()
    }

    /// Gradient of the `i`-th parameter leaf, shaped like the leaf.
    pub fn leaf(&self, i: usize) -> Value {
        let (off, shape) = &self.spans[i];
        let n: usize = shape.iter().product();
        Value::new(shape.clone(), self.flat[*off..off + n].to_vec()).expect("span matches shape")
    }
}

/// Define-then-run tape. Nodes are appended in topological order; leaves carry
/// their bound values and `forward` evaluates everything else.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_params: Vec<NodeId>,
    leaf_inputs: Vec<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf_params(&self) -> &[NodeId] {
        &self.leaf_params
    }

    pub fn leaf_inputs(&self) -> &[NodeId] {
        &self.leaf_inputs
    }

    /// Total number of scalar parameters across parameter leaves.
    pub fn param_count(&self) -> usize {
        self.leaf_params.iter().map(|&id| self.nodes[id].value.as_ref().map_or(0, Value::len)).sum()
    }

    fn push(&mut self, op: Op) -> NodeId {
        for i in op.inputs() {
            assert!(i < self.nodes.len(), "node input {i} does not precede node");
        }
        self.nodes.push(Node { op, value: None, bn: None });
        self.nodes.len() - 1
    }

    pub fn param(&mut self, v: Value) -> NodeId {
        let id = self.push(Op::Param);
        self.nodes[id].value = Some(v);
        self.leaf_params.push(id);
        id
    }

    pub fn input(&mut self, v: Value) -> NodeId {
        let id = self.push(Op::Input);
        self.nodes[id].value = Some(v);
        self.leaf_inputs.push(id);
        id
    }

    /// Rebinds a leaf. Cached outputs of non-leaf nodes become stale until the next `forward`.
    pub fn bind(&mut self, id: NodeId, v: Value) -> Result<()> {
        match self.nodes.get(id).map(|n| &n.op) {
            Some(Op::Param) | Some(Op::Input) => {
                let old = self.nodes[id].value.as_ref().map(|o| o.shape().to_vec());
                if let Some(old) = old {
                    if old != v.shape() {
                        return Err(shape_err("bind", old, v.shape()));
                    }
                }
                self.nodes[id].value = Some(v);
                for n in self.nodes.iter_mut().skip(id + 1) {
                    if !matches!(n.op, Op::Param | Op::Input) {
                        n.value = None;
                    }
                }
                Ok(())
            }
            _ => Err(Error::InvalidSpec(format!("node {id} is not a leaf"))),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::AddRow(x, bias))
    }
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::MeanRows(a))
    }
    pub fn nll(&mut self, logp: NodeId, labels: Vec<usize>) -> NodeId {
        self.push(Op::Nll(logp, labels))
    }
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64, stats: NormStats) -> NodeId {
        self.push(Op::BatchNorm { x, gamma, beta, eps, stats })
    }

    /// `x W + b`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    /// Mean over rows of the softmax entropy of each row of `logits`.
    pub fn entropy(&mut self, logits: NodeId) -> NodeId {
        let logp = self.log_softmax(logits);
        let p = self.exp(logp);
        let plogp = self.mul(p, logp);
        let m = self.mean_rows(plogp);
        self.scale(m, -1.0)
    }

    /// Mean cross-entropy of `logits` against `labels`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: Vec<usize>) -> NodeId {
        let logp = self.log_softmax(logits);
        self.nll(logp, labels)
    }

    pub fn value(&self, id: NodeId) -> Option<&Value> {
        self.nodes.get(id).and_then(|n| n.value.as_ref())
    }

    /// Batch mean and biased variance seen by a batch-norm node in the last forward.
    pub fn bn_moments(&self, id: NodeId) -> Option<(&[f64], &[f64])> {
        self.nodes.get(id).and_then(|n| n.bn.as_ref()).map(|c| (c.mean.as_slice(), c.var.as_slice()))
    }

    fn val(&self, id: NodeId) -> &Value {
        self.nodes[id].value.as_ref().expect("inputs evaluated before use")
    }

    /// Evaluates every node in order and returns the root (last node).
    pub fn forward(&mut self) -> Result<&Value> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidSpec("empty graph".into()));
        }
        for id in 0..self.nodes.len() {
            if matches!(self.nodes[id].op, Op::Param | Op::Input) {
                let v =
                    self.nodes[id].value.as_ref().ok_or_else(|| Error::InvalidSpec(format!("leaf {id} unbound")))?;
                v.check_finite(&format!("leaf {id}"))?;
                continue;
            }
            let (out, cache) = self.eval(id)?;
            out.check_finite(&format!("{} (node {id})", self.nodes[id].op.name()))?;
            self.nodes[id].value = Some(out);
            self.nodes[id].bn = cache;
        }
        Ok(self.nodes.last().and_then(|n| n.value.as_ref()).expect("forward filled root"))
    }

    fn eval(&self, id: NodeId) -> Result<(Value, Option<BnCache>)> {
        let op = &self.nodes[id].op;
        let tag = || format!("{} (node {id})", op.name());
        let out = match op {
            Op::Param | Op::Input => unreachable!(),
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                    return Err(shape_err(&tag(), format!("[n,k]x[k,m] with lhs {:?}", a.shape()), b.shape()));
                }
                let c = matmul(a.data(), b.data(), a.rows(), a.cols(), b.cols());
                Value::matrix(a.rows(), b.cols(), c)?
            }
            Op::AddRow(x, b) => {
                let (x, b) = (self.val(*x), self.val(*b));
                if b.len() != x.cols() {
                    return Err(shape_err(&tag(), x.cols(), b.len()));
                }
                let m = x.cols();
                let data = x.data().iter().enumerate().map(|(i, v)| v + b.data()[i % m]).collect();
                Value::new(x.shape().to_vec(), data)?
            }
            Op::Add(a, b) | Op::Mul(a, b) => {
                let (a, b) = (self.val(*a), self.val(*b));
                if a.shape() != b.shape() {
                    return Err(shape_err(&tag(), a.shape(), b.shape()));
                }
                let add = matches!(op, Op::Add(..));
                let data = a.data().iter().zip(b.data()).map(|(x, y)| if add { x + y } else { x * y }).collect();
                Value::new(a.shape().to_vec(), data)?
            }
            Op::Scale(a, c) => {
                let a = self.val(*a);
                Value::new(a.shape().to_vec(), a.data().iter().map(|v| v * c).collect())?
            }
            Op::Relu(a) => {
                let a = self.val(*a);
                Value::new(a.shape().to_vec(), a.data().iter().map(|v| v.max(0.0)).collect())?
            }
            Op::Exp(a) => {
                let a = self.val(*a);
                Value::new(a.shape().to_vec(), a.data().iter().map(|v| v.exp()).collect())?
            }
            Op::LogSoftmax(a) => {
                let a = self.val(*a);
                let mut data = Vec::with_capacity(a.len());
                for i in 0..a.rows() {
                    data.extend(log_softmax_row(a.row(i)));
                }
                Value::new(a.shape().to_vec(), data)?
            }
            Op::Sum(a) => Value::scalar(self.val(*a).data().iter().sum()),
            Op::MeanRows(a) => {
                let a = self.val(*a);
                Value::scalar(a.data().iter().sum::<f64>() / a.rows() as f64)
            }
            Op::Nll(a, labels) => {
                let a = self.val(*a);
                if a.shape().len() != 2 || labels.len() != a.rows() {
                    return Err(shape_err(&tag(), a.rows(), labels.len()));
                }
                let mut s = 0.0;
                for (i, &l) in labels.iter().enumerate() {
                    if l >= a.cols() {
                        return Err(Error::LabelOutOfRange { label: l, classes: a.cols() });
                    }
                    s -= a.get(i, l);
                }
                Value::scalar(s / a.rows() as f64)
            }
            Op::BatchNorm { x, gamma, beta, eps, stats } => {
                let (x, g, b) = (self.val(*x), self.val(*gamma), self.val(*beta));
                let f = x.cols();
                if x.shape().len() != 2 || g.len() != f || b.len() != f {
                    return Err(shape_err(&tag(), format!("[B,{}] with gamma/beta [{}]", g.len(), g.len()), x.shape()));
                }
                let (mean, var) = match stats {
                    NormStats::Batch => {
                        if x.rows() < 2 {
                            return Err(Error::BatchTooSmall { needed: 2, got: x.rows() });
                        }
                        batch_moments(x)
                    }
                    NormStats::Fixed { mean, var } => {
                        if mean.len() != f || var.len() != f {
                            return Err(shape_err(&tag(), f, mean.len()));
                        }
                        (mean.clone(), var.clone())
                    }
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                let mut xhat = vec![0.0; x.len()];
                let mut out = vec![0.0; x.len()];
                for i in 0..x.rows() {
                    for j in 0..f {
                        let k = i * f + j;
                        xhat[k] = (x.data()[k] - mean[j]) * inv_std[j];
                        out[k] = g.data()[j] * xhat[k] + b.data()[j];
                    }
                }
                let v = Value::new(x.shape().to_vec(), out)?;
                return Ok((v, Some(BnCache { xhat, inv_std, mean, var })));
            }
        };
        Ok((out, None))
    }

    /// Reverse-mode gradient of the root (last node) w.r.t. every parameter leaf.
    pub fn backward(&self) -> Result<GradientVector> {
        let root = self.nodes.len().checked_sub(1).ok_or_else(|| Error::InvalidSpec("empty graph".into()))?;
        self.backward_from(root)
    }

    /// Reverse-mode gradient of a scalar node `root` w.r.t. every parameter leaf.
    pub fn backward_from(&self, root: NodeId) -> Result<GradientVector> {
        let rv = self.value(root).ok_or_else(|| Error::InvalidSpec("backward called before forward".into()))?;
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Param | Op::Input) {
                grads[id] = Some(gy);
                continue;
            }
            if node.value.is_none() {
                return Err(Error::InvalidSpec(format!("node {id} not evaluated")));
            }
            let acc = |target: NodeId, g: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| match &mut grads[target] {
                Some(existing) => existing.iter_mut().zip(g).for_each(|(e, v)| *e += v),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Param | Op::Input => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                    let mut ga = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += gy[i * m + j] * bv.data()[p * m + j];
                            }
                            ga[i * k + p] = s;
                        }
                    }
                    let mut gb = vec![0.0; k * m];
                    for i in 0..n {
                        for p in 0..k {
                            let aip = av.data()[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            let row = &gy[i * m..(i + 1) * m];
                            for (dst, g) in gb[p * m..(p + 1) * m].iter_mut().zip(row) {
                                *dst += aip * g;
                            }
                        }
                    }
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::AddRow(x, b) => {
                    let m = self.val(*x).cols();
                    let mut gb = vec![0.0; m];
                    for (i, g) in gy.iter().enumerate() {
                        gb[i % m] += g;
                    }
                    acc(*x, gy, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, gy.clone(), &mut grads);
                    acc(*b, gy, &mut grads);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    let ga = gy.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    let gb = gy.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    acc(*a, ga, &mut grads);
                    acc(*b, gb, &mut grads);
                }
                Op::Scale(a, c) => acc(*a, gy.iter().map(|g| g * c).collect(), &mut grads),
                Op::Relu(a) => {
                    let av = self.val(*a);
                    let g = gy.iter().zip(av.data()).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                    acc(*a, g, &mut grads);
                }
                Op::Exp(a) => {
                    let y = node.value.as_ref().expect("evaluated");
                    acc(*a, gy.iter().zip(y.data()).map(|(g, y)| g * y).collect(), &mut grads);
                }
                Op::LogSoftmax(a) => {
                    let y = node.value.as_ref().expect("evaluated");
                    let m = y.cols();
                    let mut g = vec![0.0; y.len()];
                    for i in 0..y.rows() {
                        let gs: f64 = gy[i * m..(i + 1) * m].iter().sum();
                        for j in 0..m {
                            let k = i * m + j;
                            g[k] = gy[k] - y.data()[k].exp() * gs;
                        }
                    }
                    acc(*a, g, &mut grads);
                }
                Op::Sum(a) => {
                    let n = self.val(*a).len();
                    acc(*a, vec![gy[0]; n], &mut grads);
                }
                Op::MeanRows(a) => {
                    let av = self.val(*a);
                    acc(*a, vec![gy[0] / av.rows() as f64; av.len()], &mut grads);
                }
                Op::Nll(a, labels) => {
                    let av = self.val(*a);
                    let (n, m) = (av.rows(), av.cols());
                    let mut g = vec![0.0; av.len()];
                    for (i, &l) in labels.iter().enumerate() {
                        g[i * m + l] = -gy[0] / n as f64;
                    }
                    acc(*a, g, &mut grads);
                }
                Op::BatchNorm { x, gamma, beta, stats, .. } => {
                    let cache = node.bn.as_ref().expect("bn cache after forward");
                    let gv = self.val(*gamma);
                    let xv = self.val(*x);
                    let (b, f) = (xv.rows(), xv.cols());
                    let mut dgamma = vec![0.0; f];
                    let mut dbeta = vec![0.0; f];
                    for i in 0..b {
                        for j in 0..f {
                            let k = i * f + j;
                            dgamma[j] += gy[k] * cache.xhat[k];
                            dbeta[j] += gy[k];
                        }
                    }
                    let mut dx = vec![0.0; xv.len()];
                    match stats {
                        NormStats::Fixed { .. } => {
                            for i in 0..b {
                                for j in 0..f {
                                    let k = i * f + j;
                                    dx[k] = gy[k] * gv.data()[j] * cache.inv_std[j];
                                }
                            }
                        }
                        NormStats::Batch => {
                            // dx = inv_std/B * (B*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                            let bf = b as f64;
                            for j in 0..f {
                                let gj = gv.data()[j];
                                let s1 = dbeta[j] * gj;
                                let s2 = dgamma[j] * gj;
                                for i in 0..b {
                                    let k = i * f + j;
                                    let dxhat = gy[k] * gj;
                                    dx[k] = cache.inv_std[j] / bf * (bf * dxhat - s1 - cache.xhat[k] * s2);
                                }
                            }
                        }
                    }
                    acc(*x, dx, &mut grads);
                    acc(*gamma, dgamma, &mut grads);
                    acc(*beta, dbeta, &mut grads);
                }
            }
        }

        let mut flat = Vec::with_capacity(self.param_count());
        let mut spans = Vec::with_capacity(self.leaf_params.len());
        for &id in &self.leaf_params {
            let v = self.val(id);
            spans.push((flat.len(), v.shape().to_vec()));
            match grads.get(id).and_then(Option::as_ref) {
                Some(g) => flat.extend_from_slice(g),
                None => flat.extend(std::iter::repeat_n(0.0, v.len())),
            }
        }
        if flat.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("accumulated gradient".into()));
        }
        Ok(GradientVector { flat, spans })
    }
}

pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (dst, bv) in crow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *dst += aip * bv;
            }
        }
    }
    c
}

/// Log-sum-exp stabilized log-softmax of one row.
pub fn log_softmax_row(r: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + r.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    r.iter().map(move |v| v - lse)
}

/// Per-column mean and biased (1/B) variance.
pub fn batch_moments(x: &Value) -> (Vec<f64>, Vec<f64>) {
    let (b, f) = (x.rows(), x.cols());
    let mut mean = vec![0.0; f];
    for i in 0..b {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= b as f64);
    let mut var = vec![0.0; f];
    for i in 0..b {
        for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s /= b as f64);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let x = g.input(Value::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let w = g.param(Value::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        g.matmul(x, w);
        assert_eq!(g.forward().unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.input(Value::vector(vec![-1.0, 0.0, 2.0]));
        g.relu(x);
        assert_eq!(g.forward().unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn log_softmax_uniform() {
        let mut g = Graph::new();
        let x = g.input(Value::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        g.log_softmax(x);
        let out = g.forward().unwrap();
        for v in out.data() {
            assert!(close(*v, -std::f64::consts::LN_2, 1e-15));
        }
    }

    #[test]
    fn log_softmax_does_not_overflow() {
        let mut g = Graph::new();
        let x = g.input(Value::matrix(1, 3, vec![1000.0, 0.0, -1000.0]).unwrap());
        g.log_softmax(x);
        let out = g.forward().unwrap();
        assert!(close(out.data()[0], 0.0, 1e-12));
        assert!(close(out.data()[1], -1000.0, 1e-9));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let w = g.param(Value::vector(vec![1.0, 2.0]));
        let sq = g.mul(w, w);
        g.sum(sq);
        g.forward().unwrap();
        assert_eq!(g.backward().unwrap().flat(), &[2.0, 4.0]);
    }

    #[test]
    fn cross_entropy_logit_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let z = g.param(Value::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        g.cross_entropy(z, vec![0]);
        let loss = g.forward().unwrap().item();
        assert!(close(loss, std::f64::consts::LN_2, 1e-15));
        let grad = g.backward().unwrap();
        assert!(close(grad.flat()[0], -0.5, 1e-15));
        assert!(close(grad.flat()[1], 0.5, 1e-15));
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.input(Value::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.param(Value::matrix(2, 2, vec![0.0; 4]).unwrap());
        g.matmul(a, b);
        match g.forward() {
            Err(Error::ShapeMismatch { op, .. }) => assert!(op.contains("matmul")),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_aborts_forward() {
        let mut g = Graph::new();
        let a = g.input(Value::vector(vec![800.0]));
        g.exp(a);
        assert!(matches!(g.forward(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let a = g.param(Value::vector(vec![1.0, 2.0]));
        g.relu(a);
        g.forward().unwrap();
        assert!(matches!(g.backward(), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn graph_reusable_after_backward_and_rebind() {
        let mut g = Graph::new();
        let w = g.param(Value::vector(vec![1.0, 2.0]));
        let sq = g.mul(w, w);
        g.sum(sq);
        g.forward().unwrap();
        let first = g.backward().unwrap();
        assert_eq!(first, g.backward().unwrap());
        g.bind(w, Value::vector(vec![3.0, -1.0])).unwrap();
        assert_eq!(g.forward().unwrap().item(), 10.0);
        assert_eq!(g.backward().unwrap().flat(), &[6.0, -2.0]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let a = g.param(Value::vector(vec![1.0]));
        let _unused = g.param(Value::vector(vec![5.0, 6.0]));
        let s = g.mul(a, a);
        g.sum(s);
        g.forward().unwrap();
        let grad = g.backward().unwrap();
        assert_eq!(grad.flat(), &[2.0, 0.0, 0.0]);
        assert_eq!(grad.num_leaves(), 2);
        assert_eq!(grad.leaf(1).shape(), &[2]);
    }
}
