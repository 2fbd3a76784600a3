//! Central finite-difference gradient verification.

use super::{Scalar, Tensor};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct GradReport {
    /// Max over parameters of |analytic - numeric| / max(|analytic|, |numeric|, 1).
    pub max_rel_err: f64,
    /// (param index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub params_checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares analytic gradients against central finite differences.
///
/// `eval(params, want_grad)` returns the loss value and, when asked, the
/// analytic gradient per parameter tensor (flat, same element order). The
/// step is `h_scale * max(1, |x|)` per element; differences are formed in
/// f64 regardless of the scalar type.
pub fn gradcheck<S: Scalar>(
    params: &[Tensor<S>],
    mut eval: impl FnMut(&[Tensor<S>], bool) -> Result<(f64, Option<Vec<Vec<S>>>)>,
    h_scale: f64,
) -> Result<GradReport> {
    let (_, grads) = eval(params, true)?;
    let grads = grads.expect("eval must return gradients when want_grad = true");

    let mut work: Vec<Tensor<S>> = params.to_vec();
    let mut max_rel_err = 0.0f64;
    let mut worst = (0, 0);
    for pi in 0..params.len() {
        for ei in 0..params[pi].len() {
            let x0 = params[pi].data[ei].to64();
            let h = h_scale * x0.abs().max(1.0);

            work[pi].data[ei] = S::fl(x0 + h);
            let (f_plus, _) = eval(&work, false)?;
            work[pi].data[ei] = S::fl(x0 - h);
            let (f_minus, _) = eval(&work, false)?;
            work[pi].data[ei] = params[pi].data[ei];

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let analytic = grads[pi][ei].to64();
            let denom = analytic.abs().max(numeric.abs()).max(1.0);
            let rel = (analytic - numeric).abs() / denom;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = (pi, ei);
            }
        }
    }
    Ok(GradReport { max_rel_err, worst, params_checked: params.len() })
}
