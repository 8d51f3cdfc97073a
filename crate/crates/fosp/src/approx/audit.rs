//! Finite-difference audit of analytic gradients.

use super::ParameterVector;

pub const AUDIT_EPSILON: f64 = 1e-5;

/// Compares an analytic gradient against central finite differences of
/// `loss`, returning the max over parameters of
/// `|analytic - numeric| / max(1e-8, |numeric|)`.
///
/// `loss` must be a deterministic scalar function of the parameters.
pub fn gradient_audit<F>(params: &ParameterVector, analytic: &ParameterVector, loss: F) -> f64
where
    F: Fn(&ParameterVector) -> f64,
{
    gradient_audit_eps(params, analytic, loss, AUDIT_EPSILON)
}

pub fn gradient_audit_eps<F>(params: &ParameterVector, analytic: &ParameterVector, loss: F, eps: f64) -> f64
where
    F: Fn(&ParameterVector) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "audit gradient layout");
    let mut work = params.clone();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = params.values()[i];
        work.values_mut()[i] = orig + eps;
        let plus = loss(&work);
        work.values_mut()[i] = orig - eps;
        let minus = loss(&work);
        work.values_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic.values()[i];
        let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
