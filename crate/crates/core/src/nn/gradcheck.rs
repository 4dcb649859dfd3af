//! Central finite-difference checks for analytic gradients.

use crate::error::{Error, Result};

/// Smallest magnitude used as the denominator of a relative error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Largest relative error between `grad` and central differences of `loss`
/// around `params`, perturbing one coordinate at a time by `±step`.
pub fn max_relative_error<F>(params: &[f64], grad: &[f64], step: f64, mut loss: F) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != grad.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: grad.len(),
        });
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + step;
        let plus = loss(&probe)?;
        probe[i] = params[i] - step;
        let minus = loss(&probe)?;
        probe[i] = params[i];
        let fd = (plus - minus) / (2.0 * step);
        let denom = fd.abs().max(grad[i].abs()).max(RELATIVE_FLOOR);
        worst = worst.max((fd - grad[i]).abs() / denom);
    }
    Ok(worst)
}
