use serde::{Deserialize, Serialize};

use crate::autodiff::{hvp_fd_refined, norm, relative_error};
use crate::data::{LabeledSet, MetaBatch};
use crate::error::Result;
use crate::nn::{BnMode, Model, Paradigm, ParamMask};
use crate::pretrain::objective::{evaluate, objective_value, Evaluation, Loss};
use crate::pretrain::optim::Optimizer;

/// Batch-norm behaviour of every pre-training forward pass.
pub const TRAIN_MODE: BnMode = BnMode::TrainStats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaMode {
    /// Differentiates through the inner step (Hessian-vector correction).
    Exact,
    /// Treats the adapted parameters as independent of the pre-step ones.
    FirstOrder,
}

/// Inner and outer objectives of one meta-learning scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaSpec {
    /// Unsupervised loss of the simulated test-time step.
    pub inner: Vec<(Loss, f64)>,
    /// Parameters moved by the simulated step.
    pub inner_mask: ParamMask,
    /// Supervised-plus-unsupervised loss at the adapted point.
    pub outer: Vec<(Loss, f64)>,
}

impl MetaSpec {
    /// Cascade: entropy of the auxiliary head moves extractor and main head.
    pub fn cascade(model: &Model, lambda: f64) -> Self {
        let l = model.layout();
        Self {
            inner: vec![(Loss::AuxEntropy, 1.0)],
            inner_mask: ParamMask::from_ranges(l.total(), [l.phi.clone(), l.theta_m.clone()]),
            outer: vec![(Loss::MainCe, 1.0), (Loss::AuxEntropy, lambda)],
        }
    }

    /// Parallel: the rotation task moves the extractor only.
    pub fn parallel(model: &Model, lambda: f64) -> Self {
        let l = model.layout();
        Self {
            inner: vec![(Loss::Rotation, 1.0)],
            inner_mask: ParamMask::from_ranges(l.total(), [l.phi.clone()]),
            outer: vec![(Loss::MainCe, 1.0), (Loss::Rotation, lambda)],
        }
    }

    pub fn for_model(model: &Model, lambda: f64) -> Self {
        match model.paradigm() {
            Paradigm::Cascade => Self::cascade(model, lambda),
            Paradigm::Parallel => Self::parallel(model, lambda),
        }
    }

    fn inner_grad(&self, model: &Model, params: &[f64], trn: &LabeledSet) -> Result<Vec<f64>> {
        Ok(evaluate(model, params, &trn.x, Some(&trn.y), &self.inner, TRAIN_MODE)?.grad)
    }
}

/// One plain gradient step on the inner loss over the inner mask.
pub fn inner_step(
    model: &Model,
    params: &[f64],
    trn: &LabeledSet,
    spec: &MetaSpec,
    alpha: f64,
) -> Result<(Vec<f64>, Evaluation)> {
    let e = evaluate(model, params, &trn.x, Some(&trn.y), &spec.inner, TRAIN_MODE)?;
    let mut adapted = params.to_vec();
    for i in spec.inner_mask.indices() {
        adapted[i] -= alpha * e.grad[i];
    }
    Ok((adapted, e))
}

/// Agreement required between successive Hessian-vector estimates.
const HVP_TOL: f64 = 1e-4;

#[derive(Debug)]
pub struct MetaGradient {
    /// Gradient of the meta-objective w.r.t. the pre-step parameters.
    pub grad: Vec<f64>,
    /// Meta-objective value.
    pub loss: f64,
    /// Unweighted outer terms at the adapted point.
    pub terms: Vec<f64>,
    pub adapted: Vec<f64>,
    /// Outer-loss gradient at the adapted point.
    pub outer_grad: Vec<f64>,
    pub inner_eval: Evaluation,
    pub outer_eval: Evaluation,
}

/// Gradient of `outer(val; inner_step(params; trn))` w.r.t. `params`.
///
/// The inner step is `p - alpha * M * grad_inner(p)` with diagonal mask `M`, so the
/// chain rule gives `g - alpha * H(p) * M * g` with `g` the outer gradient at the
/// adapted point and `H` the (symmetric) inner-loss Hessian.
pub fn meta_gradient(
    model: &Model,
    params: &[f64],
    mb: &MetaBatch,
    spec: &MetaSpec,
    alpha: f64,
    mode: MetaMode,
    hvp_eps: f64,
) -> Result<MetaGradient> {
    let (adapted, inner_eval) = inner_step(model, params, &mb.trn, spec, alpha)?;
    let outer_eval = evaluate(model, &adapted, &mb.val.x, Some(&mb.val.y), &spec.outer, TRAIN_MODE)?;
    let g = outer_eval.grad.clone();
    let mut grad = g.clone();
    let v = spec.inner_mask.apply(&g);
    if mode == MetaMode::Exact && alpha != 0.0 && norm(&v) > 0.0 {
        let hv = hvp_fd_refined(|p| spec.inner_grad(model, p, &mb.trn), params, &v, hvp_eps, HVP_TOL)?;
        for (d, h) in grad.iter_mut().zip(&hv) {
            *d -= alpha * h;
        }
    }
    Ok(MetaGradient {
        grad,
        loss: outer_eval.loss,
        terms: outer_eval.terms.clone(),
        adapted,
        outer_grad: g,
        inner_eval,
        outer_eval,
    })
}

/// Meta-objective with the inner step replayed; the finite-difference target
/// for [`meta_gradient`].
pub fn composed_meta_objective(
    model: &Model,
    params: &[f64],
    mb: &MetaBatch,
    spec: &MetaSpec,
    alpha: f64,
) -> Result<f64> {
    let (adapted, _) = inner_step(model, params, &mb.trn, spec, alpha)?;
    objective_value(model, &adapted, &mb.val.x, Some(&mb.val.y), &spec.outer, TRAIN_MODE)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterSettings {
    pub alpha: f64,
    pub beta: f64,
    pub mode: MetaMode,
    pub hvp_eps: f64,
}

/// Meta-gradient at the model's parameters followed by one optimizer step of
/// rate `beta` on all of them. Running moments absorb both forward passes.
pub fn outer_step(
    model: &mut Model,
    opt: &mut Optimizer,
    mb: &MetaBatch,
    spec: &MetaSpec,
    s: &OuterSettings,
) -> Result<MetaGradient> {
    let mg = meta_gradient(model, &model.params, mb, spec, s.alpha, s.mode, s.hvp_eps)?;
    mg.inner_eval.absorb_bn(model, TRAIN_MODE);
    mg.outer_eval.absorb_bn(model, TRAIN_MODE);
    let all = ParamMask::all(model.num_params());
    let mut params = std::mem::take(&mut model.params);
    let r = opt.step(&mut params, &mg.grad, s.beta, &all);
    model.params = params;
    r.map(|_| mg)
}

/// Residuals of the gradient-alignment decomposition of the cascade meta-gradient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentCheck {
    /// Relative residual with the Hessian at the pre-step point.
    pub residual_at_psi: f64,
    /// Same with the Hessian at the adapted point (reported only).
    pub residual_at_psi_prime: f64,
}

/// Compares the exact meta-gradient restricted to the inner mask with
/// `(I - alpha H) (grad CE(psi') + lambda grad ENT(psi'))`, the two outer
/// gradients computed separately.
pub fn alignment_check(
    model: &Model,
    params: &[f64],
    mb: &MetaBatch,
    lambda: f64,
    alpha: f64,
    hvp_eps: f64,
) -> Result<AlignmentCheck> {
    let spec = MetaSpec::cascade(model, lambda);
    let mg = meta_gradient(model, params, mb, &spec, alpha, MetaMode::Exact, hvp_eps)?;
    let lhs = spec.inner_mask.apply(&mg.grad);
    let ce = evaluate(model, &mg.adapted, &mb.val.x, Some(&mb.val.y), &[(Loss::MainCe, 1.0)], TRAIN_MODE)?.grad;
    let ent = evaluate(model, &mg.adapted, &mb.val.x, None, &[(Loss::AuxEntropy, 1.0)], TRAIN_MODE)?.grad;
    let s: Vec<f64> = ce.iter().zip(&ent).map(|(c, e)| c + lambda * e).collect();
    let s = spec.inner_mask.apply(&s);
    let rhs_at = |point: &[f64]| -> Result<Vec<f64>> {
        let hv = hvp_fd_refined(|p| spec.inner_grad(model, p, &mb.trn), point, &s, hvp_eps, HVP_TOL)?;
        Ok(spec.inner_mask.apply(&s.iter().zip(&hv).map(|(a, h)| a - alpha * h).collect::<Vec<_>>()))
    };
    Ok(AlignmentCheck {
        residual_at_psi: relative_error(&lhs, &rhs_at(params)?),
        residual_at_psi_prime: relative_error(&lhs, &rhs_at(&mg.adapted)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_grad;
    use crate::data::{split_meta_batch, SourceSpec};
    use crate::nn::Architecture;
    use crate::pretrain::optim::OptimizerKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Model, MetaBatch) {
        let arch = Architecture::cascade(4, vec![6], 3).with_aux_hidden(4);
        let m = Model::init(&arch, 3).unwrap();
        assert!(m.num_params() <= 200);
        let src = SourceSpec::random_centers(3, 4, 1.0, 1.0, 7);
        let batch = src.sample(16, &mut ChaCha8Rng::seed_from_u64(1));
        (m, split_meta_batch(&batch, 0.5).unwrap())
    }

    #[test]
    fn alpha_zero_inner_step_is_identity() {
        let (m, mb) = tiny();
        let spec = MetaSpec::cascade(&m, 1.0);
        assert_eq!(inner_step(&m, &m.params, &mb.trn, &spec, 0.0).unwrap().0, m.params);
    }

    #[test]
    fn inner_step_fixes_aux_head_and_descends() {
        let (m, mb) = tiny();
        let spec = MetaSpec::cascade(&m, 1.0);
        let before = objective_value(&m, &m.params, &mb.trn.x, None, &spec.inner, TRAIN_MODE).unwrap();
        let (p, _) = inner_step(&m, &m.params, &mb.trn, &spec, 1e-3).unwrap();
        let ta = m.layout().theta_a.clone();
        assert_eq!(p[ta.clone()], m.params[ta]);
        let after = objective_value(&m, &p, &mb.trn.x, None, &spec.inner, TRAIN_MODE).unwrap();
        assert!(after < before);
    }

    #[test]
    fn exact_matches_fd_of_composition() {
        let (m, mb) = tiny();
        let spec = MetaSpec::cascade(&m, 1.0);
        let alpha = 0.05;
        let mg = meta_gradient(&m, &m.params, &mb, &spec, alpha, MetaMode::Exact, 1e-5).unwrap();
        let fd = finite_diff_grad(|p| composed_meta_objective(&m, p, &mb, &spec, alpha), &m.params, 1e-5).unwrap();
        assert!(relative_error(&mg.grad, &fd) < 1e-4, "{}", relative_error(&mg.grad, &fd));
        let fo = meta_gradient(&m, &m.params, &mb, &spec, alpha, MetaMode::FirstOrder, 1e-5).unwrap();
        assert!(relative_error(&fo.grad, &fd) > relative_error(&mg.grad, &fd));
    }

    #[test]
    fn modes_coincide_at_alpha_zero() {
        let (m, mb) = tiny();
        let spec = MetaSpec::cascade(&m, 1.0);
        let a = meta_gradient(&m, &m.params, &mb, &spec, 0.0, MetaMode::Exact, 1e-5).unwrap();
        let b = meta_gradient(&m, &m.params, &mb, &spec, 0.0, MetaMode::FirstOrder, 1e-5).unwrap();
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn alignment_identity() {
        let (m, mb) = tiny();
        let c = alignment_check(&m, &m.params, &mb, 1.0, 0.05, 1e-5).unwrap();
        assert!(c.residual_at_psi < 1e-6, "{c:?}");
    }

    #[test]
    fn parallel_meta_gradient_matches_fd() {
        let arch = Architecture::parallel(4, vec![5], 3).with_aux_hidden(3);
        let m = Model::init(&arch, 4).unwrap();
        let batch = SourceSpec::random_centers(3, 4, 1.0, 1.0, 7).sample(12, &mut ChaCha8Rng::seed_from_u64(2));
        let mb = split_meta_batch(&batch, 0.5).unwrap();
        let spec = MetaSpec::parallel(&m, 0.5);
        let mg = meta_gradient(&m, &m.params, &mb, &spec, 0.05, MetaMode::Exact, 1e-5).unwrap();
        let fd = finite_diff_grad(|p| composed_meta_objective(&m, p, &mb, &spec, 0.05), &m.params, 1e-5).unwrap();
        assert!(relative_error(&mg.grad, &fd) < 1e-4);
    }

    #[test]
    fn outer_step_moves_aux_head_and_beta_zero_is_noop() {
        let (mut m, mb) = tiny();
        let spec = MetaSpec::cascade(&m, 1.0);
        let s = OuterSettings { alpha: 1e-2, beta: 0.0, mode: MetaMode::Exact, hvp_eps: 1e-5 };
        let before = m.params.clone();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.0, m.num_params());
        outer_step(&mut m, &mut opt, &mb, &spec, &s).unwrap();
        assert_eq!(m.params, before);
        let s = OuterSettings { beta: 1e-2, ..s };
        outer_step(&mut m, &mut opt, &mb, &spec, &s).unwrap();
        let ta = m.layout().theta_a.clone();
        assert_ne!(m.params[ta.clone()], before[ta]);
    }

    #[test]
    fn outer_steps_reduce_meta_loss_on_fixed_batch() {
        let (mut m, mb) = tiny();
        let spec = MetaSpec::cascade(&m, 1.0);
        let s = OuterSettings { alpha: 1e-2, beta: 0.05, mode: MetaMode::Exact, hvp_eps: 1e-5 };
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.0, m.num_params());
        let losses: Vec<f64> = (0..100).map(|_| outer_step(&mut m, &mut opt, &mb, &spec, &s).unwrap().loss).collect();
        let ups = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(ups <= 5, "{ups} increases");
        assert!(losses[99] < losses[0]);
    }
}
