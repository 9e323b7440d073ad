//! Finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn validate_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Parameter(format!(
            "finite difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    Ok(())
}

/// Compare an analytic gradient against central differences at `x`.
///
/// `f` evaluates the scalar function and returns `(value, gradient)` where
/// the gradient is computed analytically (normally via [`super::Graph`]
/// backward). Returns the max over coordinates of
/// `|analytic - central| / max(1, |central|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Vec<f64>)>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_sampled(f, x, eps, &coords)
}

/// Same as [`finite_diff_check`] but only for the listed coordinates. Used at
/// model scale where perturbing every parameter would be quadratic.
pub fn finite_diff_check_sampled<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(f64, Vec<f64>)>,
{
    validate_eps(eps)?;
    let (value, grad) = f(x)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("f(x) is not finite: {value}")));
    }
    if grad.len() != x.numel() {
        return Err(Error::Contract(format!(
            "gradient has {} entries for {} coordinates",
            grad.len(),
            x.numel()
        )));
    }
    let mut max_err = 0.0f64;
    for &i in coords {
        if i >= x.numel() {
            return Err(Error::Parameter(format!(
                "coordinate {i} out of range for {} elements",
                x.numel()
            )));
        }
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let (fp, _) = f(&xp)?;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        let (fm, _) = f(&xm)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "perturbed evaluation not finite at coordinate {i}: {fp} / {fm}"
            )));
        }
        let central = (fp - fm) / (2.0 * eps);
        let err = (grad[i] - central).abs() / central.abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}
