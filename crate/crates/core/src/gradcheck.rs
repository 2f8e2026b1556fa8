//! Central finite-difference verification of reverse-mode gradients.
//!
//! The checker perturbs one parameter coordinate at a time, re-runs a
//! caller-supplied forward closure, and compares `(f(x+e) - f(x-e)) / 2e`
//! against the analytic gradient left in the parameter's grad buffer by a
//! prior [`crate::Tensor::backward`] call.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Error;
use crate::tensor::Tensor;
use crate::Result;

/// Outcome of checking one named parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    /// Largest relative error over the parameter's coordinates.
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_coord: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Relative error with an absolute floor, symmetric in both arguments.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = f64::max(1e-8, analytic.abs() + numeric.abs());
    (analytic - numeric).abs() / denom
}

/// Check one parameter against the analytic gradient already stored on it.
///
/// `forward` must rebuild the loss from current parameter data without
/// calling backward. It is run twice up front; a bitwise mismatch between
/// the two losses aborts the check, since finite differences are meaningless
/// on a non-deterministic function.
///
/// The parameter data is restored to its original values before returning.
pub fn finite_diff_check<F>(forward: &mut F, param: &Tensor, eps: f64) -> Result<ParamCheck>
where
    F: FnMut() -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite difference step must be positive, got {eps}")));
    }
    let analytic = param.grad().ok_or_else(|| {
        Error::Contract(String::from(
            "parameter has no gradient; run backward before finite_diff_check",
        ))
    })?;
    let l0 = forward()?;
    let l1 = forward()?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "forward pass returned {l0} then {l1} on identical inputs"
        )));
    }

    let base = param.to_vec();
    let mut worst = ParamCheck {
        name: String::new(),
        max_rel_error: 0.0,
        worst_coord: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for i in 0..base.len() {
        let mut bumped = base.clone();
        bumped[i] = base[i] + eps;
        param.set_data(bumped)?;
        let plus = forward();
        let mut bumped = base.clone();
        bumped[i] = base[i] - eps;
        param.set_data(bumped)?;
        let minus = forward();
        // Restore before surfacing any error so the caller's model is intact.
        param.set_data(base.clone())?;
        let numeric = (plus? - minus?) / (2.0 * eps);
        let rel = rel_error(analytic[i], numeric);
        if rel > worst.max_rel_error || i == 0 {
            worst = ParamCheck {
                name: String::new(),
                max_rel_error: rel,
                worst_coord: i,
                analytic_at_worst: analytic[i],
                numeric_at_worst: numeric,
            };
        }
    }
    Ok(worst)
}

/// Check every named parameter in turn, returning per-parameter results.
pub fn finite_diff_check_all<F>(
    forward: &mut F,
    params: &[(String, Tensor)],
    eps: f64,
) -> Result<Vec<ParamCheck>>
where
    F: FnMut() -> Result<f64>,
{
    let mut out = Vec::with_capacity(params.len());
    for (name, tensor) in params {
        let mut check = finite_diff_check(forward, tensor, eps)?;
        check.name = name.clone();
        out.push(check);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;
    use core::cell::Cell;

    #[test]
    fn quadratic_loss_checks_clean() {
        let x = Tensor::param(vec![1.5, -0.5, 2.0], vec![1, 3]).unwrap();
        let forward = |x: &Tensor| -> crate::Result<f64> { x.mul(x)?.sum_all().item() };
        x.zero_grad();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        let mut f = || forward(&x);
        let check = finite_diff_check(&mut f, &x, 1e-5).unwrap();
        assert!(check.max_rel_error < 1e-9, "{}", check.max_rel_error);
        // Data restored after the sweep.
        assert_eq!(x.to_vec(), vec![1.5, -0.5, 2.0]);
    }

    #[test]
    fn corrupted_analytic_gradient_is_flagged() {
        let x = Tensor::param(vec![1.0, 2.0], vec![1, 2]).unwrap();
        x.zero_grad();
        let loss = x.mul(&x).unwrap().sum_all();
        loss.backward().unwrap();
        // Skew the stored gradient by overwriting via a second backward on a
        // different loss; grads accumulate, so the stored values are now wrong
        // for the quadratic alone.
        let skew = x.sum_all();
        skew.backward().unwrap();
        let mut f = || x.mul(&x).unwrap().sum_all().item();
        let check = finite_diff_check(&mut f, &x, 1e-5).unwrap();
        assert!(check.max_rel_error > 1e-2, "{}", check.max_rel_error);
    }

    #[test]
    fn missing_backward_is_an_error() {
        let x = Tensor::param(vec![1.0], vec![1, 1]).unwrap();
        let mut f = || x.sum_all().item();
        assert!(matches!(
            finite_diff_check(&mut f, &x, 1e-5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn non_positive_eps_is_an_error() {
        let x = Tensor::param(vec![1.0], vec![1, 1]).unwrap();
        x.sum_all().backward().unwrap();
        let mut f = || x.sum_all().item();
        assert!(matches!(finite_diff_check(&mut f, &x, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn non_deterministic_forward_is_rejected() {
        let x = Tensor::param(vec![1.0], vec![1, 1]).unwrap();
        x.sum_all().backward().unwrap();
        let calls = Cell::new(0.0f64);
        let mut f = || {
            calls.set(calls.get() + 1.0);
            Ok(calls.get())
        };
        assert!(matches!(
            finite_diff_check(&mut f, &x, 1e-5),
            Err(Error::NonDeterministic(_))
        ));
    }

    #[test]
    fn check_all_names_each_parameter() {
        let a = Tensor::param(vec![1.0], vec![1, 1]).unwrap();
        let b = Tensor::param(vec![2.0], vec![1, 1]).unwrap();
        let fwd = |a: &Tensor, b: &Tensor| -> crate::Result<f64> {
            a.mul(b)?.sum_all().item()
        };
        a.zero_grad();
        b.zero_grad();
        let loss = a.mul(&b).unwrap().sum_all();
        loss.backward().unwrap();
        let params = vec![("a".to_string(), a.clone()), ("b".to_string(), b.clone())];
        let mut f = || fwd(&a, &b);
        let checks = finite_diff_check_all(&mut f, &params, 1e-5).unwrap();
        assert_eq!(checks.len(), 2);
        assert_eq!(checks[0].name, "a");
        assert_eq!(checks[1].name, "b");
        for c in checks {
            assert!(c.max_rel_error < 1e-9);
        }
    }
}
