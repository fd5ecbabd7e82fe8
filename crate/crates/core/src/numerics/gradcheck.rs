//! Central finite-difference gradient checking.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Relative error between an analytic and numeric derivative.
///
/// The denominator is floored at `1e-6` so that gradients that are zero on
/// both sides compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let y = f(&mut tape, xv)?;
    let v = tape.value(y);
    if v.numel() != 1 {
        return Err(Error::shape(format!(
            "gradient check needs a scalar function, got {:?}",
            v.shape()
        )));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {v}")));
    }
    Ok(v)
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
pub fn check_gradients<F>(f: F, x: &Tensor, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::shape("gradient check needs a scalar function"));
    }
    if !tape.value(y).item().is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {}", tape.value(y).item())));
    }
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut numeric = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let d = (fp - fm) / (2.0 * eps);
        numeric.data_mut()[i] = d;
        let e = relative_error(analytic.data()[i], d);
        if e > max_rel_error {
            max_rel_error = e;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        worst_index,
        passed: max_rel_error <= tol,
    })
}
