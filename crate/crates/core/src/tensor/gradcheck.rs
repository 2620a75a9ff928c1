//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Outcome of one gradient check.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    /// Relative error per input, in input order.
    pub per_input: Vec<f64>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Gradient magnitude below which errors are measured in absolute terms.
/// Central differences of an `O(1)` function at step `1e-5` carry rounding
/// noise near `1e-11`, so an exactly zero gradient (e.g. a bias that a
/// softmax cancels) would otherwise report a relative error of one.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Relative error between two gradient vectors in the max norm:
/// `max|a - b| / max(max|a|, max|b|, GRAD_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    diff / scale.max(GRAD_FLOOR)
}

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x + h) - f(x - h)) / 2h` for each input element.
///
/// `f` receives a fresh tape and one leaf per input and must return a scalar.
pub fn grad_check<T, F>(
    name: &str,
    f: F,
    inputs: &[Tensor<T>],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::Contract(format!(
            "finite-difference step {step} not in (0, 1e-3]"
        )));
    }
    let eval = |xs: &[Tensor<T>]| -> Result<(Tape<T>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::Contract(format!(
                "gradient check needs a scalar function, got shape {:?}",
                tape.shape(out)
            )));
        }
        Ok((tape, vars, out))
    };

    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let h = T::of(step);
    for (k, x) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = grads
            .get_or_zeros(vars[k], x.shape())
            .data()
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let mut numeric = Vec::with_capacity(x.len());
        for e in 0..x.len() {
            let orig = x.data()[e];
            work[k].data_mut()[e] = orig + h;
            let (tp, _, op) = eval(&work)?;
            let fp = tp.value(op).data()[0].as_f64();
            work[k].data_mut()[e] = orig - h;
            let (tm, _, om) = eval(&work)?;
            let fm = tm.value(om).data()[0].as_f64();
            work[k].data_mut()[e] = orig;
            numeric.push((fp - fm) / (2.0 * step));
        }
        per_input.push(relative_error(&analytic, &numeric));
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        name: name.to_owned(),
        passed: max_rel_err <= tol && max_rel_err.is_finite(),
        per_input,
        max_rel_err,
        tol,
    })
}
