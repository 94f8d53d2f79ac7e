use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Value};
use crate::data::ssl_transform_labels;
use crate::error::{Error, Result};
use crate::nn::{BnMode, Heads, Model, Paradigm};

/// One scalar loss on the network outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// Cross-entropy of the main logits against the labels.
    MainCe,
    /// Mean prediction entropy of the main logits.
    MainEntropy,
    /// Mean prediction entropy of the auxiliary logits.
    AuxEntropy,
    /// Cross-entropy of the auxiliary head on the four-rotation expansion of the batch.
    Rotation,
}

impl Loss {
    fn needs_plain_pass(self) -> bool {
        !matches!(self, Loss::Rotation)
    }
}

/// Weighted sum of losses.
pub type Objective = [(Loss, f64)];

/// Loss value, gradient over every parameter, and the graph that produced them.
#[derive(Debug)]
pub struct Evaluation {
    pub loss: f64,
    /// Unweighted value of each term, in objective order.
    pub terms: Vec<f64>,
    pub grad: Vec<f64>,
    graph: Graph,
    plain: Option<Heads>,
    ssl: Option<Heads>,
}

impl Evaluation {
    /// Applies `mode`'s running-moment rule from the un-expanded pass (or the
    /// rotation pass if there was none).
    pub fn absorb_bn(&self, model: &mut Model, mode: BnMode) {
        if let Some(h) = self.plain.as_ref().or(self.ssl.as_ref()) {
            model.absorb_bn(&self.graph, h, mode);
        }
    }
}

/// Evaluates `objective` at `params` on batch `x` and differentiates it.
pub fn evaluate(
    model: &Model,
    params: &[f64],
    x: &Value,
    labels: Option<&[usize]>,
    objective: &Objective,
    mode: BnMode,
) -> Result<Evaluation> {
    model.check_input(x)?;
    if objective.is_empty() {
        return Err(Error::InvalidConfig("empty objective".into()));
    }
    let mut g = Graph::new();
    let p = model.register_params(&mut g, params);
    let plain = objective.iter().any(|(l, _)| l.needs_plain_pass()).then(|| {
        let xi = g.input(x.clone());
        model.build(&mut g, &p, xi, mode)
    });
    let ssl = if objective.iter().any(|(l, _)| *l == Loss::Rotation) {
        if model.paradigm() != Paradigm::Parallel {
            return Err(Error::MethodModelMismatch {
                method: "rotation loss".into(),
                paradigm: model.paradigm().to_string(),
            });
        }
        let (xr, yr) = ssl_transform_labels(x)?;
        let xi = g.input(xr);
        let h = model.build(&mut g, &p, xi, mode);
        Some((h, yr))
    } else {
        None
    };
    let mut term_nodes = Vec::with_capacity(objective.len());
    for (loss, _) in objective {
        let node = match loss {
            Loss::MainCe => {
                let y = labels.ok_or_else(|| Error::InvalidConfig("cross-entropy needs labels".into()))?;
                let h = plain.as_ref().expect("plain pass");
                if y.len() != x.rows() {
                    return Err(crate::error::shape_err("labels", x.rows(), y.len()));
                }
                g.cross_entropy(h.main, y.to_vec())
            }
            Loss::MainEntropy => g.entropy(plain.as_ref().expect("plain pass").main),
            Loss::AuxEntropy => g.entropy(plain.as_ref().expect("plain pass").aux),
            Loss::Rotation => {
                let (h, yr) = ssl.as_ref().expect("rotation pass");
                g.cross_entropy(h.aux, yr.clone())
            }
        };
        term_nodes.push(node);
    }
    let mut root = None;
    for (&node, (_, w)) in term_nodes.iter().zip(objective) {
        let scaled = if *w == 1.0 { node } else { g.scale(node, *w) };
        root = Some(match root {
            None => scaled,
            Some(r) => g.add(r, scaled),
        });
    }
    let root = root.expect("nonempty objective");
    g.forward()?;
    let loss = g.value(root).expect("forward").item();
    let terms = term_nodes.iter().map(|&n| g.value(n).expect("forward").item()).collect();
    if !loss.is_finite() {
        return Err(Error::NonFinite("objective value".into()));
    }
    let grad = g.backward_from(root)?.into_flat();
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("objective gradient".into()));
    }
    Ok(Evaluation { loss, terms, grad, graph: g, plain, ssl: ssl.map(|(h, _)| h) })
}

/// Objective value only.
pub fn objective_value(
    model: &Model,
    params: &[f64],
    x: &Value,
    labels: Option<&[usize]>,
    objective: &Objective,
    mode: BnMode,
) -> Result<f64> {
    Ok(evaluate(model, params, x, labels, objective, mode)?.loss)
}
