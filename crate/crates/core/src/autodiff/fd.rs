use crate::error::{Error, Result};

/// Central-difference gradient of `loss` at `params`.
pub fn finite_diff_grad<F>(loss: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("eps must be positive, got {eps}")));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let plus = loss(&p)?;
        p[i] = orig - eps;
        let minus = loss(&p)?;
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss probe at coordinate {i}")));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Hessian-vector product by central differences of `grad` along `v / |v|`,
/// rescaled by `|v|`.
pub fn hvp_fd<F>(grad: F, params: &[f64], v: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    hvp_probe(&grad, params, v, eps).map(|(hv, _)| hv)
}

/// The product plus an estimate of its roundoff error.
fn hvp_probe<F>(grad: &F, params: &[f64], v: &[f64], eps: f64) -> Result<(Vec<f64>, f64)>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!("eps must be positive, got {eps}")));
    }
    if v.len() != params.len() {
        return Err(crate::error::shape_err("hvp_fd", params.len(), v.len()));
    }
    let vn = norm(v);
    if vn == 0.0 {
        return Err(Error::ZeroVector);
    }
    let step = eps / vn;
    let plus: Vec<f64> = params.iter().zip(v).map(|(p, d)| p + step * d).collect();
    let minus: Vec<f64> = params.iter().zip(v).map(|(p, d)| p - step * d).collect();
    let gp = grad(&plus)?;
    let gm = grad(&minus)?;
    let out: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) * vn / (2.0 * eps)).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("hvp_fd".into()));
    }
    // backprop through softmax and entropy cancels large intermediates, so
    // gradients carry far more than one ulp of error
    let noise = 1e-11 * norm(&gp).max(norm(&gm)) * vn / eps;
    Ok((out, noise))
}

/// [`hvp_fd`] with the step shrunk 4x at a time until two consecutive
/// estimates agree within `tol` (relative) or roundoff; the larger-step one of
/// the agreeing pair is returned. A probe straddling a relu kink carries a
/// `1/step` error that the next, smaller probe does not share, so kinked
/// estimates never pass; the a.e. Hessian is what meta-gradients need.
pub fn hvp_fd_refined<F>(grad: F, params: &[f64], v: &[f64], eps: f64, tol: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    const MAX_REFINEMENTS: usize = 8;
    let mut step = eps;
    let (mut prev, mut prev_noise) = hvp_probe(&grad, params, v, step)?;
    for _ in 0..MAX_REFINEMENTS {
        step /= 4.0;
        let (next, noise) = hvp_probe(&grad, params, v, step)?;
        let diff: Vec<f64> = prev.iter().zip(&next).map(|(a, b)| a - b).collect();
        if norm(&diff) <= tol * norm(&prev).max(norm(&next)) + prev_noise + noise {
            return Ok(prev);
        }
        prev = next;
        prev_noise = noise;
    }
    Err(Error::NonFinite(format!("hvp_fd did not settle down to step {step:e}")))
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}
