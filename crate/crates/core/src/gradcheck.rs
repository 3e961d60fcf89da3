//! Central finite-difference gradient verification.

use crate::params::Params;

/// Default perturbation for central differences in double precision.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor so parameters with a near-zero gradient are compared
/// on an absolute scale instead of blowing up the ratio.
const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences of `loss` at `params`,
/// over every scalar parameter, and returns the worst relative error.
pub fn max_relative_error<P, F>(params: &P, analytic: &P, loss: F, step: f64) -> f64
where
    P: Params + Clone,
    F: Fn(&P) -> f64,
{
    let analytic: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.data.to_vec()).collect();
    let mut probe = params.clone();
    let mut worst = 0.0_f64;
    for (ti, grad) in analytic.iter().enumerate() {
        for (j, &a) in grad.iter().enumerate() {
            let orig = probe.tensors_mut()[ti][j];
            probe.tensors_mut()[ti][j] = orig + step;
            let up = loss(&probe);
            probe.tensors_mut()[ti][j] = orig - step;
            let down = loss(&probe);
            probe.tensors_mut()[ti][j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    worst
}
