use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// Compares analytic gradients against central differences.
///
/// Every coordinate of every tensor in `params` is perturbed by `±eps` and
/// `(f(θ+eps) − f(θ−eps)) / 2eps` is compared with the matching entry of
/// `analytic`. Returns the maximum of `|analytic − numeric| / max(1e-12, |numeric|)`.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &[Tensor2D],
    analytic: &[Tensor2D],
    eps: f64,
) -> Result<f64>
where
    F: FnMut(&[Tensor2D]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(Error::input(format!(
            "{} parameters but {} gradients",
            params.len(),
            analytic.len()
        )));
    }
    for (p, g) in params.iter().zip(analytic) {
        if p.shape() != g.shape() {
            return Err(Error::Dimension {
                op: "finite_diff_check",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
    }

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for t in 0..work.len() {
        for k in 0..work[t].data().len() {
            let orig = work[t].data()[k];
            work[t].data_mut()[k] = orig + eps;
            let plus = loss_fn(&work)?;
            work[t].data_mut()[k] = orig - eps;
            let minus = loss_fn(&work)?;
            work[t].data_mut()[k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::numeric(format!(
                    "loss not finite while perturbing tensor {t} entry {k}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t].data()[k];
            let rel = (a - numeric).abs() / numeric.abs().max(1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
