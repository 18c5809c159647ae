//! Central finite-difference gradient checking.

use crate::error::{Error, Result};

/// A scalar function of a flat input vector with an analytic gradient.
pub trait Differentiable {
    fn forward(&self, x: &[f64]) -> Result<f64>;

    fn backward(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Identifies the piecewise-smooth region `x` lies in (relu masks, smooth-L1
    /// branches). A coordinate whose `±ε` probes change the region straddles a
    /// kink and is skipped. `None` means the function is smooth everywhere.
    fn regime(&self, _x: &[f64]) -> Option<u64> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_coordinate: Option<usize>,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Checks every input coordinate.
pub fn grad_check<F: Differentiable + ?Sized>(f: &F, x: &[f64], eps: f64) -> Result<GradCheckReport> {
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, eps, &coords)
}

/// Checks only the listed coordinates.
pub fn grad_check_coords<F: Differentiable + ?Sized>(
    f: &F,
    x: &[f64],
    eps: f64,
    coords: &[usize],
) -> Result<GradCheckReport> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {eps}")));
    }
    let analytic = f.backward(x)?;
    if analytic.len() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "gradient has {} entries for {} inputs",
            analytic.len(),
            x.len()
        )));
    }
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("analytic gradient at coordinate {i}")));
    }
    let base_regime = f.regime(x);
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: None,
        checked: 0,
        skipped: 0,
    };
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + eps;
        let regime_plus = f.regime(&probe);
        let plus = f.forward(&probe)?;
        probe[i] = orig - eps;
        let regime_minus = f.regime(&probe);
        let minus = f.forward(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("forward output near coordinate {i}")));
        }
        if regime_plus != base_regime || regime_minus != base_regime {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        report.checked += 1;
        if report.worst_coordinate.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coordinate = Some(i);
        }
    }
    Ok(report)
}
