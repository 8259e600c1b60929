//! Central finite-difference oracle for verifying tape gradients in 64-bit.
//!
//! The numeric side only ever evaluates forward passes, so it is independent
//! of every backward rule it checks.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Step used by the acceptance checks.
pub const DEFAULT_EPS: f64 = 1e-3;

/// Gradient magnitude below which differences are judged absolutely. Rounding
/// in an O(1) loss limits any 64-bit difference quotient with step 1e-3 to
/// roughly 1e-12 absolute accuracy, so smaller gradients cannot be resolved
/// to a relative 1e-4.
pub const NOISE_FLOOR: f64 = 1e-7;

/// `|a - n| / max(NOISE_FLOOR, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(NOISE_FLOOR)
}

/// Fourth-order central differences
/// `(f(x - 2h) - 8 f(x - h) + 8 f(x + h) - f(x + 2h)) / 12h` for every
/// coordinate of `x`, with `h = eps`.
pub fn finite_difference(
    x: &[f64],
    eps: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut at = |k: f64| {
            probe[i] = x[i] + k * eps;
            f(&probe)
        };
        let (m2, m1, p1, p2) = (at(-2.0)?, at(-1.0)?, at(1.0)?, at(2.0)?);
        probe[i] = x[i];
        out.push((m2 - 8.0 * m1 + 8.0 * p1 - p2) / (12.0 * eps));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    /// Analytic and numeric gradient at the worst element.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences, perturbing each element of each input in turn.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad()))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[k].numel()];
        let analytic = grads.get(v).unwrap_or(&zeros).to_vec();
        let numeric = finite_difference(inputs[k].data(), eps, |x| {
            work[k].data_mut().copy_from_slice(x);
            eval(&work)
        })?;
        work[k].data_mut().copy_from_slice(inputs[k].data());
        for (j, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            let e = relative_error(a, n);
            report.checked += 1;
            if e > report.max_rel_error {
                report.max_rel_error = e;
                report.worst = (k, j);
                report.worst_values = (a, n);
            }
        }
    }
    Ok(report)
}
