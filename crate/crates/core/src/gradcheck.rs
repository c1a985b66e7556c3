//! Central-difference gradient checking.
//!
//! Every analytic backward pass in the crate is verified against this oracle.
//! The error measure is the symmetric relative error
//! `|a - n| / max(1e-8, |a| + |n|)`, maximized over coordinates.

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }

    /// Combines reports from several parameter groups.
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let checked = self.checked + other.checked;
        let mut worst = if other.max_rel_error > self.max_rel_error {
            other
        } else {
            self
        };
        worst.checked = checked;
        worst
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / DENOM_FLOOR.max(analytic.abs() + numeric.abs())
}

/// Compares `analytic` against central differences of `f` around `x`.
///
/// `f` is evaluated at `x ± eps·e_i` for every coordinate `i`.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    if x.len() != analytic.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} coordinates but {} gradient entries", x.len(), analytic.len()),
        ));
    }
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic_at_worst: analytic.first().copied().unwrap_or(0.0),
        numeric_at_worst: 0.0,
        checked: x.len(),
    };
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("grad_check objective at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || i == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic_at_worst = analytic[i];
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}
