//! Central finite-difference gradient checking.

use super::tensor::Tensor;
use crate::error::{MudaError, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, element index) of the worst entry.
    pub worst: (usize, usize),
    /// Analytic and numeric values at `worst`.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Magnitudes below this are compared absolutely: central differences carry
/// rounding noise around `1e-16·|f|/step`, which swamps exact zeros.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences of `f` around `point`.
///
/// `f` must be a deterministic function of its argument; any randomness
/// (dropout masks) has to be frozen by the caller, e.g. by reseeding.
pub fn grad_check<F>(point: &[Tensor], analytic: &[Tensor], step: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if point.len() != analytic.len() {
        return Err(MudaError::Check(format!(
            "{} parameters but {} analytic gradients",
            point.len(),
            analytic.len()
        )));
    }
    for (p, a) in point.iter().zip(analytic) {
        p.ensure_same_shape(a, "parameter vs analytic gradient")?;
    }
    let base_a = f(point)?;
    let base_b = f(point)?;
    if base_a.to_bits() != base_b.to_bits() {
        return Err(MudaError::Check(format!(
            "function is not deterministic: {base_a} then {base_b}"
        )));
    }

    let mut work = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        checked: 0,
    };
    for t in 0..work.len() {
        for i in 0..work[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + step;
            let plus = f(&work)?;
            work[t].data_mut()[i] = orig - step;
            let minus = f(&work)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[t].data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (t, i);
                report.worst_values = (analytic[t].data()[i], numeric);
            }
        }
    }
    Ok(report)
}
